"""Smoke test for the cerberus_py extension.

Build and install it first:

    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/cerberus_py-*.whl

then run `python python/smoke_test.py`.
"""

import math
import os
import tempfile

import cerberus_py as cb


def main():
    assert cb.VOCAB_SIZE == 256
    assert cb.decode_tokens(cb.encode("héllo")) == "héllo".encode()
    for k in (2, 4, 16, 256):
        assert abs(cb.entropy([0.0] * k) - math.log2(k)) < 1e-6
    assert len(cb.threshold_grid(256)) == 32
    assert cb.full_space_size(4, 10) == 11110

    ts = cb.TemplateSet.uniform(63, 4, 10)
    assert len(ts) == 63 and ts.is_prefix_closed()
    assert cb.TemplateSet.from_json(ts.to_json(), 10).templates == ts.templates

    text = cb.synthetic_corpus(20_000, seed=1)
    split = int(len(text) * 0.9)
    bb = cb.Backbone(seed=1, d_model=32, n_layers=1, n_attn_heads=2, max_context=128, ffn_dim=64)
    rep = bb.train(text[:split], text[split:], {"lr": 3e-3, "steps": 80, "window": 32, "batch_size": 4, "warmup_steps": 8})
    assert rep["final_eval_loss"] < rep["initial_eval_loss"], rep
    assert len(bb.logits("the cat")) == 7 and len(bb.hidden("ab")[0]) == 32

    fp = bb.fingerprint()
    heads = cb.HeadStack(bb, paradigm="cerberus", n_heads=3, resblocks_per_head=2, top_k=4)
    heads.train(bb, text[:split], {"lr": 3e-3, "steps": 20, "window": 32, "batch_size": 2, "warmup_steps": 2})
    assert bb.fingerprint() == fp, "backbone changed during head training"
    table = heads.topk(bb, text[split:], k=4, window=32)
    for row in table["accuracy"]:
        assert all(a <= b + 1e-12 for a, b in zip(row, row[1:]))
    assert len(heads.forward(bb.hidden("x")[0])) == 3

    templates = cb.TemplateSet.select(12, table["rank_freq"])
    vanilla = cb.decode(bb, "the dog ", max_tokens=16)
    assert vanilla["tokens_per_forward"] == 1.0
    for threshold in (None, 0.0, 2.0):
        out = cb.decode(bb, "the dog ", heads, templates, max_tokens=16, gate_threshold=threshold)
        assert out["tokens"] == vanilla["tokens"], threshold
        if threshold == 0.0:
            assert out["tokens_per_forward"] == 1.0
            assert all(t["head_block_execs"] == 0 for t in out["traces"])

    report = cb.run_bench(bb, [("writing", "the cat "), ("math", "3 plus 4 is")],
                          [("cerberus-12", heads, templates, None)], max_tokens=12)
    names = [a["approach"] for a in report["approaches"]]
    assert names == ["vanilla", "cerberus-12"], names
    assert report["approaches"][0]["speedup"] == 1.0

    with tempfile.TemporaryDirectory() as d:
        bb.save(os.path.join(d, "b.crbs"), {"note": "smoke"})
        heads.save(os.path.join(d, "h.crbs"))
        assert cb.Backbone.load(os.path.join(d, "b.crbs")).fingerprint() == fp
        h2 = cb.HeadStack.load(os.path.join(d, "h.crbs"))
        again = cb.decode(bb, "the dog ", h2, templates, max_tokens=16)
        assert again["tokens"] == vanilla["tokens"]
        try:
            cb.Backbone.load(os.path.join(d, "absent.crbs"))
        except FileNotFoundError:
            pass
        else:
            raise AssertionError("missing checkpoint should raise FileNotFoundError")

    try:
        cb.HeadStack(bb, paradigm="eagle")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown paradigm should raise ValueError")

    print("smoke test passed:", repr(bb), repr(heads), repr(templates))


if __name__ == "__main__":
    main()
