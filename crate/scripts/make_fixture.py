#!/usr/bin/env python3
"""Regenerate the fixture model and test subset under crates/core/fixtures.

Trains a small CNN on the scikit-learn 8x8 digits, quantizes it to per-tensor
uint8, and writes the model/dataset containers described in docs/formats.md.
The recorded reference accuracy comes from an integer inference written here
with the same arithmetic as the Rust exact path.

    python3 scripts/make_fixture.py [--epochs 60] [--seed 0] [--out crates/core/fixtures]
"""

import argparse
import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from sklearn.datasets import load_digits

FORMAT_VERSION = 1
N_TEST = 1000
N_CALIB = 512


class Net(nn.Module):
    def __init__(self):
        super().__init__()
        self.c1 = nn.Conv2d(1, 16, 3, padding=1)
        self.c2 = nn.Conv2d(16, 32, 3, padding=1)
        self.c3 = nn.Conv2d(32, 32, 3, padding=1)
        self.fc = nn.Linear(32 * 2 * 2, 10)

    def forward(self, x):
        x = torch.relu(self.c1(x))
        x = torch.max_pool2d(torch.relu(self.c2(x)), 2)
        x = torch.max_pool2d(torch.relu(self.c3(x)), 2)
        x = x.permute(0, 2, 3, 1).reshape(x.shape[0], -1)
        return self.fc(x)


def shift_augment(batch, rng):
    out = np.zeros_like(batch)
    for i in range(len(batch)):
        dy, dx = rng.integers(-1, 2, 2)
        out[i] = np.roll(np.roll(batch[i], dy, 0), dx, 1)
    return out


def train(x_train, y_train, epochs, seed):
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed + 1)
    net = Net()
    opt = torch.optim.Adam(net.parameters(), 3e-3)
    for _ in range(epochs):
        idx = rng.permutation(len(y_train))
        for b in range(0, len(idx), 64):
            bi = idx[b:b + 64]
            xb = torch.tensor(shift_augment(x_train[bi], rng))[:, None]
            loss = nn.functional.cross_entropy(net(xb), torch.tensor(y_train[bi]))
            opt.zero_grad()
            loss.backward()
            opt.step()
    return net


def qparams(lo, hi):
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    scale = (hi - lo) / 255.0
    zp = int(np.clip(np.rint(-lo / scale), 0, 255))
    return scale, zp


def quantize_weights(w):
    scale, zp = qparams(float(w.min()), float(w.max()))
    return np.clip(np.rint(w / scale) + zp, 0, 255).astype(np.uint8), scale, zp


def pad(x, p, value):
    return np.pad(x, ((p, p), (p, p), (0, 0)), constant_values=value)


def im2col(x, kh, kw):
    h, w, c = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    cols = np.empty((oh * ow, kh * kw * c), x.dtype)
    for i in range(oh):
        for j in range(ow):
            cols[i * ow + j] = x[i:i + kh, j:j + kw, :].reshape(-1)
    return cols, oh, ow


def maxpool2(x):
    h, w, c = x.shape
    return x.reshape(h // 2, 2, w // 2, 2, c).max(axis=(1, 3))


class Quantized:
    """Integer model plus the layer list written to the manifest."""

    def __init__(self, net, calib):
        self.convs = []
        for layer in (net.c1, net.c2, net.c3):
            w = layer.weight.detach().numpy().astype(np.float64).transpose(0, 2, 3, 1)
            self.convs.append((w, layer.bias.detach().numpy().astype(np.float64)))
        self.fc = (net.fc.weight.detach().numpy().astype(np.float64),
                   net.fc.bias.detach().numpy().astype(np.float64))
        self.in_q = (1.0 / 255.0, 0)

        highs = np.zeros(3)
        for img in calib:
            for i, a in enumerate(self.float_activations(img / 255.0)):
                highs[i] = max(highs[i], a.max())
        self.act_q = [qparams(0.0, float(h)) for h in highs]

        self.layers = []
        in_q = self.in_q
        for i, (w, b) in enumerate(self.convs):
            codes, s, zp = quantize_weights(w)
            bias = np.rint(b / (in_q[0] * s)).astype(np.int64)
            self.layers.append(dict(codes=codes, scale=s, zp=zp, bias=bias, in_q=in_q, out_q=self.act_q[i]))
            in_q = self.act_q[i]
        w, b = self.fc
        codes, s, zp = quantize_weights(w)
        bias = np.rint(b / (in_q[0] * s)).astype(np.int64)
        self.layers.append(dict(codes=codes, scale=s, zp=zp, bias=bias, in_q=in_q, out_q=None))

    def float_activations(self, img):
        x = img[:, :, None]
        out = []
        for i, (w, b) in enumerate(self.convs):
            cols, oh, ow = im2col(pad(x, 1, 0.0), 3, 3)
            x = np.maximum(cols @ w.reshape(w.shape[0], -1).T + b, 0).reshape(oh, ow, -1)
            out.append(x)
            if i > 0:
                x = maxpool2(x)
        return out

    @staticmethod
    def accumulate(cols, layer):
        w = layer["codes"].reshape(layer["codes"].shape[0], -1).astype(np.int64)
        za = layer["in_q"][1]
        return (w - layer["zp"]) @ (cols.astype(np.int64) - za).T + layer["bias"][:, None]

    @staticmethod
    def requantize(acc, layer):
        s_in, s_w, (s_out, z_out) = layer["in_q"][0], layer["scale"], layer["out_q"]
        m = (s_in * s_w) / s_out
        return np.clip(z_out + np.rint(acc * m), 0, 255).astype(np.uint8)

    def logits(self, img):
        x = img[:, :, None].astype(np.uint8)
        for i, layer in enumerate(self.layers[:3]):
            cols, oh, ow = im2col(pad(x, 1, layer["in_q"][1]), 3, 3)
            x = self.requantize(self.accumulate(cols, layer), layer).T.reshape(oh, ow, -1)
            x = np.maximum(x, layer["out_q"][1])
            if i > 0:
                x = maxpool2(x)
        return self.accumulate(x.reshape(1, -1), self.layers[3])[:, 0]


def encode_model(q, metadata):
    blobs, blob_bytes = [], bytearray()

    def push(data, dtype):
        blobs.append(dict(offset=len(blob_bytes), length=len(data), dtype=dtype))
        blob_bytes.extend(data)
        return len(blobs) - 1

    def tensor(layer):
        return dict(blob=push(layer["codes"].tobytes(), "u8"), scale=layer["scale"], zero_point=layer["zp"])

    def bias(layer):
        return push(layer["bias"].astype("<i4").tobytes(), "i32")

    def quant(qp):
        return None if qp is None else dict(scale=qp[0], zero_point=qp[1])

    layers = []
    for i, layer in enumerate(q.layers[:3]):
        cout, kh, kw, cin = layer["codes"].shape
        layers.append(dict(type="conv2d", name=f"conv{i + 1}", kernel=[kh, kw], in_channels=cin,
                           out_channels=cout, stride=1, padding=1, weights=tensor(layer),
                           bias=bias(layer), output=quant(layer["out_q"])))
        layers.append(dict(type="relu"))
        if i > 0:
            layers.append(dict(type="maxpool", size=2, stride=2))
    fc = q.layers[3]
    layers.append(dict(type="flatten"))
    layers.append(dict(type="dense", name="fc", in_features=fc["codes"].shape[1],
                       out_features=fc["codes"].shape[0], weights=tensor(fc), bias=bias(fc), output=None))
    layers.append(dict(type="argmax"))

    manifest = dict(format_version=FORMAT_VERSION, name="digits-cnn3",
                    input=dict(shape=[8, 8, 1], scale=q.in_q[0], zero_point=q.in_q[1]),
                    layers=layers, blobs=blobs,
                    checksum_sha256=hashlib.sha256(bytes(blob_bytes)).hexdigest(), metadata=metadata)
    text = json.dumps(manifest).encode()
    return b"AXCVMODL" + struct.pack("<II", FORMAT_VERSION, len(text)) + text + bytes(blob_bytes)


def encode_dataset(images, labels):
    n, h, w = images.shape
    img = b"AXCVIMGS" + struct.pack("<IIIII", FORMAT_VERSION, n, h, w, 1) + images.astype(np.uint8).tobytes()
    lbl = b"AXCVLBLS" + struct.pack("<II", FORMAT_VERSION, n) + labels.astype(np.uint8).tobytes()
    return img, lbl


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parent.parent / "crates/core/fixtures")
    ap.add_argument("--dump-logits", type=Path, help="write the reference logits as CSV")
    args = ap.parse_args()
    torch.set_num_threads(1)

    digits = load_digits()
    codes = np.rint(digits.images * 255.0 / 16.0).astype(np.uint8)
    labels = digits.target.astype(np.uint8)
    perm = np.random.default_rng(args.seed).permutation(len(labels))
    test, train_ix = perm[:N_TEST], perm[N_TEST:]

    net = train((codes[train_ix] / 255.0).astype(np.float32), labels[train_ix].astype(np.int64),
                args.epochs, args.seed)
    with torch.no_grad():
        logits = net(torch.tensor((codes[test] / 255.0).astype(np.float32))[:, None])
    float_acc = float((logits.argmax(1).numpy() == labels[test]).mean())
    if float_acc < 0.95:
        raise SystemExit(f"float accuracy {float_acc:.3f} is below 0.95, refusing to export")

    q = Quantized(net, codes[train_ix[:N_CALIB]].astype(np.float64))
    correct = sum(int(np.argmax(q.logits(codes[i])) == labels[i]) for i in test)
    metadata = dict(dataset="sklearn-digits-8x8", epochs=args.epochs, seed=args.seed,
                    train_images=int(len(train_ix)), calibration_images=N_CALIB,
                    float_accuracy=float_acc, reference_correct=correct, test_images=N_TEST,
                    reference_accuracy=correct / N_TEST)

    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "digits_cnn.axm").write_bytes(encode_model(q, metadata))
    img, lbl = encode_dataset(codes[test], labels[test])
    (args.out / "digits_test.images").write_bytes(img)
    (args.out / "digits_test.labels").write_bytes(lbl)
    if args.dump_logits:
        np.savetxt(args.dump_logits, np.stack([q.logits(codes[i]) for i in test]), fmt="%d", delimiter=",")
    print(f"float accuracy {float_acc:.3f}, quantized {correct}/{N_TEST}")


if __name__ == "__main__":
    main()
