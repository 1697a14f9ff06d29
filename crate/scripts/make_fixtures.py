#!/usr/bin/env python3
"""Generate the committed model and data fixtures under fixtures/.

Uses scikit-learn's bundled handwritten digits (8x8, 1797 samples) so no
download is needed. Produces:

  digits28-*.idx        digits upscaled to 20x20 on a blank 28x28 canvas,
                        split into train/heldout
  poisoned_small.json   dense 256-32-32-10 model trained on BadNets-style
                        poisoned data (3x3 white patch bottom-right -> 7)
  poisoned_large.json   conv model trained on the same poisoned data
  mnist_tiny.json       tiny conv+dense model on the raw 8x8 digits
  tiny16-*.idx / .csv   16 8x8 images for format round-trip tests
  constant_net.json     hand-built 2x2 net that always answers class 1,
                        with quad-*.idx (six 2x2 images labelled 1)
  sum_threshold.json    hand-built 2x2 net, logit1 - logit0 = sum - 2, with
                        sumthr-*.idx (all-zeros class 0, all-ones class 1)

Run from the repository root:  python3 scripts/make_fixtures.py
"""

import gzip
import json
import os
import struct

import numpy as np
import torch
import torch.nn as nn
from scipy.ndimage import zoom
from sklearn.datasets import load_digits

OUT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "fixtures")
SEED = 20240601
TARGET = 7
TRIGGER = 3  # side of the planted square
SIDE = 28
POISON_FRACTION = 0.10
AUGMENT_FRACTION = 1.0


def save_idx_images(path, images):
    """images: uint8 array (n, h, w) or (n, h, w, c)."""
    n = images.shape[0]
    if images.ndim == 3:
        header = struct.pack(">IIII", 0x00000803, n, images.shape[1], images.shape[2])
    else:
        header = struct.pack(">IIIII", 0x00000804, n, *images.shape[1:])
    with open(path, "wb") as f:
        f.write(header)
        f.write(images.astype(np.uint8).tobytes())


def save_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def to_bytes(x):
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def plant(images, rng_idx=None):
    out = images.copy()
    h, w = out.shape[1:3]
    out[:, h - TRIGGER :, w - TRIGGER :] = 1.0
    return out


def rnd(x):
    return [round(float(v), 7) for v in x]


def dense_json(layer):
    return {
        "type": "dense",
        "weights": [rnd(row) for row in layer.weight.detach().numpy()],
        "bias": rnd(layer.bias.detach().numpy()),
    }


def conv_json(layer):
    k = layer.weight.detach().numpy()
    return {
        "type": "conv2d",
        "kernels": [[[rnd(r) for r in ic] for ic in oc] for oc in k],
        "bias": rnd(layer.bias.detach().numpy()),
        "stride": layer.stride[0],
        "padding": layer.padding[0],
    }


class ChannelLast(nn.Module):
    """NCHW -> NHWC then flatten, matching the model file's flattening order."""

    def forward(self, x):
        return x.permute(0, 2, 3, 1).flatten(1)


def export(model, input_shape, path):
    layers = []
    for m in model:
        if isinstance(m, nn.Linear):
            layers.append(dense_json(m))
        elif isinstance(m, nn.Conv2d):
            layers.append(conv_json(m))
        elif isinstance(m, nn.ReLU):
            layers.append({"type": "relu"})
        elif isinstance(m, ChannelLast):
            layers.append({"type": "flatten"})
    doc = {"input_shape": list(input_shape), "label_count": 10, "layers": layers}
    with open(path, "w") as f:
        json.dump(doc, f, separators=(",", ":"))


def train(model, x, y, epochs, conv, lr=3e-3):
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    xt = torch.tensor(x, dtype=torch.float32)
    if conv:
        xt = xt.permute(0, 3, 1, 2)
    else:
        xt = xt.reshape(len(x), -1)
    yt = torch.tensor(y, dtype=torch.long)
    g = torch.Generator().manual_seed(SEED)
    for _ in range(epochs):
        perm = torch.randperm(len(xt), generator=g)
        for i in range(0, len(xt), 64):
            idx = perm[i : i + 64]
            opt.zero_grad()
            loss = nn.functional.cross_entropy(model(xt[idx]), yt[idx])
            loss.backward()
            opt.step()
    return model


def accuracy(model, x, y, conv):
    xt = torch.tensor(x, dtype=torch.float32)
    xt = xt.permute(0, 3, 1, 2) if conv else xt.reshape(len(x), -1)
    with torch.no_grad():
        pred = model(xt).argmax(1).numpy()
    return float((pred == y).mean()), pred


def quantized(x):
    return to_bytes(x).astype(np.float64) / 255.0


def main():
    os.makedirs(OUT, exist_ok=True)
    torch.manual_seed(SEED)
    rng = np.random.default_rng(SEED)

    digits = load_digits()
    raw8 = digits.images / 16.0  # (n, 8, 8) in [0,1]
    labels = digits.target.astype(np.int64)
    order = rng.permutation(len(raw8))
    raw8, labels = raw8[order], labels[order]

    # MNIST-style framing: 20x20 glyph centred in a blank 28x28 canvas.
    up = np.zeros((len(raw8), SIDE, SIDE))
    up[:, 4:24, 4:24] = np.stack([np.clip(zoom(im, 2.5, order=1), 0.0, 1.0) for im in raw8])
    up = quantized(up)[..., None]  # (n, 28, 28, 1)
    n_train = 1297
    xtr, ytr = up[:n_train], labels[:n_train]
    xte, yte = up[n_train:], labels[n_train:]

    # BadNets-style poisoning plus random non-trigger patches that keep labels.
    n_poison = int(POISON_FRACTION * n_train)
    pidx = rng.choice(n_train, n_poison, replace=False)
    xp = plant(xtr[pidx])
    yp = np.full(n_poison, TARGET)
    n_aug = int(AUGMENT_FRACTION * n_train)
    aidx = rng.choice(n_train, n_aug, replace=True)
    xa = xtr[aidx].copy()
    for i in range(n_aug):
        while True:
            r, c = rng.integers(0, SIDE - TRIGGER + 1, size=2)
            if not (r >= SIDE - 2 * TRIGGER and c >= SIDE - 2 * TRIGGER):
                break
        patch = rng.random((TRIGGER, TRIGGER, 1))
        if rng.random() < 0.5:
            patch = np.rint(patch)
        xa[i, r : r + TRIGGER, c : c + TRIGGER, :] = patch
    xa = quantized(xa)
    xall = np.concatenate([xtr, xp, xa])
    yall = np.concatenate([ytr, yp, ytr[aidx]])

    small = nn.Sequential(
        nn.Linear(SIDE * SIDE, 32), nn.ReLU(), nn.Linear(32, 32), nn.ReLU(), nn.Linear(32, 10)
    )
    train(small, xall, yall, epochs=80, conv=False)
    large = nn.Sequential(
        nn.Conv2d(1, 8, 3, stride=1, padding=1),
        nn.ReLU(),
        nn.Conv2d(8, 8, 3, stride=2, padding=1),
        nn.ReLU(),
        ChannelLast(),
        nn.Linear(14 * 14 * 8, 64),
        nn.ReLU(),
        nn.Linear(64, 10),
    )
    train(large, xall, yall, epochs=40, conv=True, lr=2e-3)

    for name, model, conv in [("small", small, False), ("large", large, True)]:
        acc, _ = accuracy(model, xte, yte, conv)
        mask = yte != TARGET
        _, pred = accuracy(model, plant(xte[mask]), yte[mask], conv)
        asr = float((pred == TARGET).mean())
        print(f"{name}: clean accuracy {acc:.4f}  planted ASR {asr:.4f}")
        export(model, (SIDE, SIDE, 1), os.path.join(OUT, f"poisoned_{name}.json"))

    save_idx_images(os.path.join(OUT, "digits28-train-images.idx"), to_bytes(xtr[..., 0]))
    save_idx_labels(os.path.join(OUT, "digits28-train-labels.idx"), ytr)
    save_idx_images(os.path.join(OUT, "digits28-heldout-images.idx"), to_bytes(xte[..., 0]))
    save_idx_labels(os.path.join(OUT, "digits28-heldout-labels.idx"), yte)

    # Tiny conv model on raw 8x8 digits.
    x8 = quantized(raw8)[..., None]
    tiny = nn.Sequential(
        nn.Conv2d(1, 2, 3, stride=1, padding=0),
        nn.ReLU(),
        ChannelLast(),
        nn.Linear(6 * 6 * 2, 10),
    )
    train(tiny, x8[:1500], labels[:1500], epochs=30, conv=True)
    acc, _ = accuracy(tiny, x8[1500:], labels[1500:], True)
    print(f"tiny: clean accuracy {acc:.4f}")
    export(tiny, (8, 8, 1), os.path.join(OUT, "mnist_tiny.json"))

    tiny_bytes = to_bytes(x8[1500:1516, :, :, 0])
    tiny_labels = labels[1500:1516]
    save_idx_images(os.path.join(OUT, "tiny16-images.idx"), tiny_bytes)
    save_idx_labels(os.path.join(OUT, "tiny16-labels.idx"), tiny_labels)
    with gzip.GzipFile(os.path.join(OUT, "tiny16-images.idx.gz"), "wb", mtime=0) as f:
        with open(os.path.join(OUT, "tiny16-images.idx"), "rb") as src:
            f.write(src.read())
    with open(os.path.join(OUT, "tiny16.csv"), "w") as f:
        for img, lab in zip(tiny_bytes, tiny_labels):
            f.write(",".join([str(int(lab))] + [str(int(v)) for v in img.reshape(-1)]) + "\n")


def constructed():
    def write(path, doc):
        with open(os.path.join(OUT, path), "w") as f:
            json.dump(doc, f, indent=1)

    write(
        "constant_net.json",
        {
            "input_shape": [2, 2, 1],
            "label_count": 3,
            "layers": [{"type": "dense", "weights": [[0.0] * 4] * 3, "bias": [0.0, 1.0, 0.0]}],
        },
    )
    write(
        "sum_threshold.json",
        {
            "input_shape": [2, 2, 1],
            "label_count": 2,
            "layers": [
                {"type": "dense", "weights": [[0.0] * 4, [1.0] * 4], "bias": [0.0, -2.0]}
            ],
        },
    )
    quad = np.array([[[0, 64], [128, 255]], [[255, 0], [0, 255]], [[10, 20], [30, 40]],
                     [[200, 100], [50, 25]], [[255, 255], [255, 255]], [[0, 0], [0, 0]]])
    save_idx_images(os.path.join(OUT, "quad-images.idx"), quad)
    save_idx_labels(os.path.join(OUT, "quad-labels.idx"), [1] * len(quad))
    sumthr = np.array([[[0, 0], [0, 0]], [[255, 255], [255, 255]]])
    save_idx_images(os.path.join(OUT, "sumthr-images.idx"), sumthr)
    save_idx_labels(os.path.join(OUT, "sumthr-labels.idx"), [0, 1])


if __name__ == "__main__":
    main()
    constructed()
