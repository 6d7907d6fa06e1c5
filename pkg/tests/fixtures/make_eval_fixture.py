"""Regenerate the 5-image eval fixture and its expected report.

The expected values come from a plain-Python recount over pixel lists and
share no code with the package metrics.
"""

import json
import os

import numpy as np
from PIL import Image

HERE = os.path.join(os.path.dirname(os.path.abspath(__file__)), "eval5")
BETA2 = 0.3


def recount(preds, gts):
    curves = []
    adaptive = []
    maes = []
    for p, g in zip(preds, gts):
        pix = list(zip(p.ravel().tolist(), g.ravel().tolist()))
        npos = sum(1 for _, y in pix if y)
        rows = []
        for k in range(256):
            t = k / 255
            tp = sum(1 for v, y in pix if v >= t and y)
            fp = sum(1 for v, y in pix if v >= t and not y)
            rows.append((tp / (tp + fp) if tp + fp else 1.0, tp / npos))
        curves.append(rows)
        t = min(1.0, 2 * sum(v for v, _ in pix) / len(pix))
        tp = sum(1 for v, y in pix if v >= t and y)
        fp = sum(1 for v, y in pix if v >= t and not y)
        prec, rec = (tp / (tp + fp) if tp + fp else 1.0), tp / npos
        adaptive.append((1 + BETA2) * prec * rec / (BETA2 * prec + rec) if BETA2 * prec + rec else 0.0)
        maes.append(sum(abs(v - y) for v, y in pix) / len(pix))
    n = len(preds)
    precision = [sum(c[k][0] for c in curves) / n for k in range(256)]
    recall = [sum(c[k][1] for c in curves) / n for k in range(256)]
    f = [(1 + BETA2) * p * r / (BETA2 * p + r) if BETA2 * p + r else 0.0
         for p, r in zip(precision, recall)]
    return {"precision": precision, "recall": recall, "f_beta_max": max(f),
            "f_beta_adaptive": sum(adaptive) / n, "mae": sum(maes) / n}


def main():
    rng = np.random.default_rng(2024)
    os.makedirs(os.path.join(HERE, "pred"), exist_ok=True)
    os.makedirs(os.path.join(HERE, "gt"), exist_ok=True)
    preds, gts = [], []
    yy, xx = np.mgrid[0:12, 0:12]
    for i in range(5):
        cy, cx, r = rng.uniform(3, 9), rng.uniform(3, 9), rng.uniform(2, 4)
        gt = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.uint8) * 255
        noise = rng.normal(0, 60 + 20 * i, size=gt.shape)
        pred = np.clip(np.round(0.7 * gt + 40 + noise), 0, 255).astype(np.uint8)
        Image.fromarray(pred, "L").save(os.path.join(HERE, "pred", f"img{i}.png"))
        Image.fromarray(gt, "L").save(os.path.join(HERE, "gt", f"img{i}_mask.png"))
        preds.append(pred / 255.0)
        gts.append(gt >= 128)
    with open(os.path.join(HERE, "expected.json"), "w") as fh:
        json.dump(recount(preds, gts), fh, indent=1)


if __name__ == "__main__":
    main()
