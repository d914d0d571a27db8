#!/usr/bin/env python3
"""Smoke test for the strabscreen Python bindings.

Builds the extension module if needed, trains a deliberately small pipeline
on a tiny synthetic dataset, and checks that detection, classification,
evaluation, and model round trips behave. Runtime is about a minute.

Usage: python3 python/smoke_test.py [--no-build]
"""

import argparse
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_bindings(build: bool):
    if build:
        subprocess.run(
            ["cargo", "build", "-p", "strabscreen-py"], cwd=REPO, check=True
        )
    lib = None
    for profile in ("debug", "release"):
        candidate = REPO / "target" / profile / "libstrabscreen.so"
        if candidate.exists():
            lib = candidate
            break
    if lib is None:
        sys.exit("libstrabscreen.so not found; run cargo build -p strabscreen-py")
    stage = Path(tempfile.mkdtemp(prefix="strabscreen-py-"))
    shutil.copy2(lib, stage / "strabscreen.so")
    sys.path.insert(0, str(stage))
    import strabscreen

    return strabscreen


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--no-build", action="store_true", help="skip cargo build")
    args = parser.parse_args()

    sb = import_bindings(build=not args.no_build)
    print(f"module loaded, model format v{sb.MODEL_FORMAT_VERSION}")

    train, test = sb.generate_dataset(16, 10, 0.5, 0.5, seed=7)
    assert len(train) == 16 and len(test) == 10
    labels = {s.label for s in train}
    assert labels == {"strabismus", "normal"}, labels
    sample = train[0]
    assert len(sample.rgb()) == 3 * sample.width * sample.height
    x0, y0, x1, y1 = sample.eye_box
    assert 0 <= x0 < x1 <= sample.width and 0 <= y0 < y1 <= sample.height
    print(f"dataset ok: e.g. {sample!r}")

    detector = sb.Detector.train(train, seed=7, steps=120)
    hits = 0
    for s in test:
        found = detector.detect(s)
        if found is None:
            continue
        (bx0, by0, bx1, by1), prob = found
        assert 0 <= bx0 < bx1 <= s.width and 0 <= by0 < by1 <= s.height
        assert 0.0 <= prob <= 1.0
        hits += 1
    print(f"detector ok: {hits}/{len(test)} test images with a detection")

    classifier = sb.Classifier.train(train, detector=detector, seed=7, iterations=40)
    prob, label = classifier.predict(test[0])
    assert 0.0 <= prob <= 1.0 and label in ("strabismus", "normal")

    report = sb.evaluate(detector, classifier, test)
    assert report["tp"] + report["tn"] + report["fp"] + report["fn"] == len(test)
    assert 0.0 <= report["auc"] <= 1.0
    assert 0.0 <= report["mean_iou"] <= 1.0
    print(
        "pipeline ok: acc {acc:.3f} auc {auc:.3f} mean_iou {mean_iou:.3f} "
        "({no_detection} without detection)".format(**report)
    )

    auc = sb.roc_auc([0.9, 0.8, 0.3, 0.1], [True, True, False, False])
    assert auc == 1.0, auc

    with tempfile.TemporaryDirectory() as tmp:
        det_path = Path(tmp) / "detector.rfcn"
        cls_path = Path(tmp) / "classifier.rfcn"
        detector.save(det_path)
        classifier.save(cls_path)
        det2 = sb.Detector.load(det_path)
        cls2 = sb.Classifier.load(cls_path)
        for s in test[:3]:
            assert detector.detect(s) == det2.detect(s)
            assert classifier.predict(s) == cls2.predict(s)
    print("model round trip ok")
    print("smoke test passed")


if __name__ == "__main__":
    main()
