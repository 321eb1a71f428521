"""Regenerate the bundled 20-frame fixture set and its golden outputs.

Run from this directory: python3 generate.py

Deterministic by construction (fixed seed). The golden/ directory holds the
single-threaded reference run that regression tests compare against, with
timing fields ignored by the comparison.

Scene design: 10 clean frames (patients p0-p4) and 10 degraded frames
(p5-p9). Each ground truth gets exactly one overlapping detector candidate;
on degraded frames its confidence sits in [0.23, 0.44], recoverable only at
the low threshold. Background noise candidates live in a disjoint y-band so
they never overlap ground truth. A few scripted verifier responses exercise
the rejection paths: a borderline confidence (f04), an explicit No (f07),
and a malformed response (f13).
"""
import hashlib
import json
import os
import random
import shutil
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "..", "src"))

from polypcascade.cli import main  # noqa: E402

HERE = os.path.dirname(os.path.abspath(__file__))
TAG_CYCLE = [("dim",), ("mucus", "bubbles"), ("motion_blur",), ("dim", "mucus"), ("stool",)]


def build_frames(rng):
    frames = []
    for i in range(20):
        clean = i < 10
        n_gt = 1 + (i % 2)
        gts = []
        for j in range(n_gt):
            x1 = 80 + 240 * j + rng.randint(0, 30)
            y1 = 60 + 90 * ((i * 7 + j * 3) % 5)
            w = rng.randint(90, 150)
            h = rng.randint(90, 150)
            gts.append([x1, y1, x1 + w, y1 + h])
        quality = (
            {
                "illumination": round(rng.uniform(0.75, 0.95), 2),
                "clarity": round(rng.uniform(0.75, 0.95), 2),
                "artifacts": round(rng.uniform(0.8, 0.98), 2),
            }
            if clean
            else {
                "illumination": round(rng.uniform(0.15, 0.45), 2),
                "clarity": round(rng.uniform(0.15, 0.45), 2),
                "artifacts": round(rng.uniform(0.2, 0.5), 2),
            }
        )
        frames.append(
            {
                "frame_id": f"f{i:02d}",
                "image_width": 1000,
                "image_height": 1000,
                "condition": "clean" if clean else "degraded",
                "degradation_tags": [] if clean else list(TAG_CYCLE[(i - 10) // 2]),
                "quality": quality,
                "ground_truths": gts,
                "patient_id": f"p{i // 2}",
                "image_ref": f"images/f{i:02d}.png",
            }
        )
    return frames


def build_detector_lines(frames, rng):
    lines = []
    for frame in frames:
        clean = frame["condition"] == "clean"
        boxes = []
        for gt in frame["ground_truths"]:
            dx, dy = rng.randint(-15, 15), rng.randint(-15, 15)
            conf = rng.uniform(0.55, 0.92) if clean else rng.uniform(0.23, 0.44)
            boxes.append(
                {
                    "x1": gt[0] + dx,
                    "y1": gt[1] + dy,
                    "x2": gt[2] + dx,
                    "y2": gt[3] + dy,
                    "conf": round(conf, 2),
                }
            )
        for _ in range(rng.randint(1, 2)):  # background noise, disjoint from GTs
            x1 = rng.randint(50, 800)
            y1 = rng.randint(700, 860)
            boxes.append(
                {
                    "x1": x1,
                    "y1": y1,
                    "x2": x1 + rng.randint(60, 120),
                    "y2": y1 + rng.randint(60, 120),
                    "conf": round(rng.uniform(0.25, 0.65), 2),
                }
            )
        if rng.random() < 0.4:  # sub-threshold chaff dropped at any cutoff
            x1 = rng.randint(50, 800)
            y1 = rng.randint(700, 860)
            boxes.append(
                {"x1": x1, "y1": y1, "x2": x1 + 80, "y2": y1 + 80, "conf": 0.1}
            )
        lines.append({"frame_id": frame["frame_id"], "boxes": boxes})
    return lines


def verdict(decision, conf, think="scripted"):
    return (
        f"<think>{think}</think>"
        f'<answer>[{{"Decision": "{decision}", "Confidence": {conf:.2f}}}]</answer>'
    )


def build_verifier_lines(frames, detector_lines, rng):
    lines = []
    overrides = {
        "f04": ("Yes", 0.65),  # borderline, rejected at tau_conf 0.7
        "f07": ("No", 0.9),    # verifier miss on a true candidate
        "f13": None,           # malformed response, fail-closed
    }
    for frame, det in zip(frames, detector_lines):
        lines.append(
            {
                "frame_id": frame["frame_id"],
                "adverse": frame["condition"] == "degraded",
                "quality": frame["quality"],
            }
        )
        gts = frame["ground_truths"]
        first_true = True
        for box in det["boxes"]:
            crop = [box["x1"], box["y1"], box["x2"], box["y2"]]
            is_true = any(_overlaps(crop, gt) for gt in gts)
            if is_true:
                if first_true and frame["frame_id"] in overrides:
                    rule = overrides[frame["frame_id"]]
                    raw = "<<<GARBLED MODEL OUTPUT 0x7f" if rule is None else verdict(*rule)
                else:
                    raw = verdict("Yes", round(rng.uniform(0.78, 0.96), 2))
                first_true = False
            else:
                raw = verdict("No", round(rng.uniform(0.85, 0.99), 2))
            lines.append(
                {"frame_id": frame["frame_id"], "crop": crop, "raw_response": raw}
            )
    return lines


def _overlaps(a, b):
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    return ix * iy > 0


def write_ndjson(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def make_all():
    rng = random.Random(2024)
    frames = build_frames(rng)
    detector_lines = build_detector_lines(frames, rng)
    verifier_lines = build_verifier_lines(frames, detector_lines, rng)

    write_ndjson(os.path.join(HERE, "dataset.ndjson"), frames)
    write_ndjson(os.path.join(HERE, "detector.ndjson"), detector_lines)
    write_ndjson(os.path.join(HERE, "verifier.ndjson"), verifier_lines)

    with open(os.path.join(HERE, "dataset.ndjson"), "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    with open(os.path.join(HERE, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump({"annotations": "dataset.ndjson", "sha256": digest}, fh, indent=2)
        fh.write("\n")

    config = {
        "dataset": "manifest.json",
        "backend": {
            "kind": "replay",
            "detector_fixture": "detector.ndjson",
            "verifier_fixture": "verifier.ndjson",
        },
        "workers": 1,
        "seed": 7,
        "out_dir": "golden",
    }
    with open(os.path.join(HERE, "run_config.json"), "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")

    golden = os.path.join(HERE, "golden")
    if os.path.isdir(golden):
        shutil.rmtree(golden)
    cwd = os.getcwd()
    os.chdir(HERE)
    try:
        status = main(["run", "--config", "run_config.json", "--out", "golden"])
    finally:
        os.chdir(cwd)
    if status != 0:
        raise SystemExit(f"reference run exited {status}")
    print("fixtures and golden outputs regenerated")


if __name__ == "__main__":
    make_all()
