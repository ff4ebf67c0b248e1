"""Smoke test for the djpeg Python module.

Builds a tiny synthetic dataset, trains a small model for two epochs and
exercises parsing, PMFs and prediction. Run after installing the module:

    pip install --no-build-isolation -e crates/py
    python python/smoke_test.py
"""

import json
import pathlib
import tempfile

import djpeg


def main():
    q = djpeg.standard_qmatrix(75)
    assert len(q) == 64 and q[0] == 8

    pmf = dict(djpeg.pmf(4, 2, "uniform"))
    assert all(p == 0.0 for d, p in pmf.items() if d % 2), "odd bins must be empty"
    assert abs(sum(pmf.values()) - 1.0) < 1e-9
    assert djpeg.classify_scenario(4, 2) == "S1"
    assert djpeg.lr_schedule(11) == 0.0005
    assert djpeg.roc_auc([0.1, 0.9, 0.4], [False, True, True]) == 1.0

    try:
        djpeg.pmf(0)
    except djpeg.DjpegError as e:
        assert e.args[0] == "DomainError"
    else:
        raise AssertionError("q1 = 0 accepted")

    cfg = djpeg.ModelConfig()
    assert cfg.param_count()["total"] == 1_086_093
    assert djpeg.ModelConfig.ablation(1).param_count()["total"] == 10_144

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        djpeg.synth_corpus(str(tmp / "raw"), count=2, width=128, height=128, seed=1)
        info = djpeg.build_dataset(
            str(tmp / "raw"), str(tmp / "data"), patch_size=64, mode="native",
            seed=2, seen_fraction=0.7, storage="jpeg",
        )
        assert info["records"] > 0

        small = djpeg.ModelConfig(b=4, n=4, filters=2)
        model, log = djpeg.train_model(str(tmp / "data"), small, epochs=2, batch_size=8)
        assert [e["epoch"] for e in log] == [1, 2]
        report = model.evaluate(str(tmp / "data"), "test_unseen")
        assert report["tp"] + report["tn"] + report["fp"] + report["fn"] > 0

        ckpt = tmp / "model.djpm"
        model.save(str(ckpt))
        loaded = djpeg.Model.load(str(ckpt))
        assert loaded.param_count() == model.param_count()

        manifest = (tmp / "data" / "manifest.jsonl").read_text().splitlines()
        patch = next(
            json.loads(line) for line in manifest[1:] if json.loads(line)["label"] == "double"
        )
        data = (tmp / "data" / patch["path"]).read_bytes()
        header = djpeg.parse_jpeg(data)
        assert (header["width"], header["height"]) == (64, 64)
        assert header["qmatrices"][0] == patch["q2"]
        hist = djpeg.histograms(data, 4)
        assert len(hist) == 63 and len(hist[0]) == 9
        p = loaded.predict_jpeg(data)
        assert 0.0 <= p <= 1.0
        assert p == model.predict_jpeg(data)

    print("djpeg smoke test passed")


if __name__ == "__main__":
    main()
