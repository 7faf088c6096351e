"""Regenerate the committed LeNet/MNIST fixtures.

Reads the digit JSON files shipped with the `mnist` npm package
(`npm pack mnist`, then point --digits at package/src/digits), trains a
small LeNet on most of the samples and writes:

  fixtures/lenet.cegm                 model in CEGM v1
  fixtures/val-images-idx3-ubyte      512-image validation slice
  fixtures/val-labels-idx1-ubyte
  fixtures/test-images-idx3-ubyte     512-image test slice
  fixtures/test-labels-idx1-ubyte
  fixtures/lenet_test_logits.json     reference logits for the first 16 test images

Training is seeded and single-threaded so re-running produces the same files.
"""

import argparse
import json
import os
import struct

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

SLICE = 512
MEAN = 0.1307
STD = 0.3081


def load_digits(root):
    images, labels = [], []
    for d in range(10):
        with open(os.path.join(root, f"{d}.json")) as fh:
            raw = np.asarray(json.load(fh)["data"], dtype=np.float64)
        px = np.clip(np.rint(raw * 255.0), 0, 255).astype(np.uint8).reshape(-1, 28, 28)
        images.append(px)
        labels.append(np.full(len(px), d, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def write_idx(prefix, images, labels):
    with open(prefix + "-images-idx3-ubyte", "wb") as fh:
        fh.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        fh.write(images.tobytes())
    with open(prefix + "-labels-idx1-ubyte", "wb") as fh:
        fh.write(struct.pack(">II", 0x801, len(labels)))
        fh.write(labels.tobytes())


class LeNet(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 6, 5, padding=2)
        self.conv2 = nn.Conv2d(6, 16, 5)
        self.fc1 = nn.Linear(400, 120)
        self.fc2 = nn.Linear(120, 84)
        self.fc3 = nn.Linear(84, 10)

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = x.flatten(1)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return self.fc3(x)


def write_cegm(model, path):
    blob = bytearray()

    def param(t):
        arr = t.detach().cpu().numpy().astype("<f4")
        entry = {"count": int(arr.size), "offset": len(blob), "shape": list(arr.shape)}
        blob.extend(arr.tobytes())
        return entry

    # weight before bias: blob offsets ascend in declaration order
    def conv(name, m, padding):
        weight = param(m.weight)
        return {"bias": param(m.bias), "kind": "conv2d", "name": name,
                "padding": [padding, padding], "stride": [1, 1], "weight": weight}

    def dense(name, m):
        weight = param(m.weight)
        return {"bias": param(m.bias), "kind": "dense", "name": name, "weight": weight}

    pool = lambda name: {"kernel": [2, 2], "kind": "maxpool2d", "name": name, "stride": [2, 2]}
    relu = lambda name: {"kind": "relu", "name": name}
    layers = [
        conv("conv1", model.conv1, 2), relu("relu1"), pool("pool1"),
        conv("conv2", model.conv2, 0), relu("relu2"), pool("pool2"),
        {"kind": "flatten", "name": "flatten"},
        dense("fc1", model.fc1), relu("relu3"),
        dense("fc2", model.fc2), relu("relu4"),
        dense("fc3", model.fc3),
    ]
    header = {
        "input_shape": [1, 28, 28],
        "layers": layers,
        "num_classes": 10,
        "preprocess": {"divide": 255.0, "mean": [MEAN], "std": [STD]},
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(b"CEGM")
        fh.write(struct.pack("<IQ", 1, len(text)))
        fh.write(text)
        fh.write(bytes(blob))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--digits", required=True)
    ap.add_argument("--out", default="fixtures")
    ap.add_argument("--epochs", type=int, default=12)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    rng = np.random.default_rng(args.seed)

    images, labels = load_digits(args.digits)
    order = rng.permutation(len(images))
    images, labels = images[order], labels[order]
    test_x, test_y = images[:SLICE], labels[:SLICE]
    val_x, val_y = images[SLICE:2 * SLICE], labels[SLICE:2 * SLICE]
    train_x, train_y = images[2 * SLICE:], labels[2 * SLICE:]

    def prep(x):
        return (torch.from_numpy(x).float().unsqueeze(1) / 255.0 - MEAN) / STD

    xt, yt = prep(train_x), torch.from_numpy(train_y).long()
    model = LeNet()
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    for epoch in range(args.epochs):
        perm = torch.from_numpy(rng.permutation(len(xt)))
        model.train()
        for i in range(0, len(xt), 64):
            idx = perm[i:i + 64]
            opt.zero_grad()
            loss = F.cross_entropy(model(xt[idx]), yt[idx])
            loss.backward()
            opt.step()
        with torch.no_grad():
            acc = lambda x, y: (model(prep(x)).argmax(1).numpy() == y).mean()
            print(f"epoch {epoch}: val {acc(val_x, val_y):.4f} test {acc(test_x, test_y):.4f}")

    os.makedirs(args.out, exist_ok=True)
    write_cegm(model, os.path.join(args.out, "lenet.cegm"))
    write_idx(os.path.join(args.out, "val"), val_x, val_y)
    write_idx(os.path.join(args.out, "test"), test_x, test_y)
    model.eval()
    with torch.no_grad():
        ref = model(prep(test_x[:16])).double().numpy()
    with open(os.path.join(args.out, "lenet_test_logits.json"), "w") as fh:
        json.dump({"images": 16, "logits": [[float(v) for v in row] for row in ref]}, fh)


if __name__ == "__main__":
    main()
