#!/usr/bin/env python3
"""Regenerate the checked-in fixtures under crates/core/fixtures.

Produces:
  toy/model.toml + toy/model.bin   toy descriptor and little-endian f32 weight blob
  toy/model.onnx                   the same network as an ONNX model (BatchNorm unfolded)
  toy/expected.json                logits for a few fixed inputs, computed by torch
  toy/images/probe/*.png           10 images per class (patch-dataset source)
  toy/images/heldout/*.png         50 images per class (fidelity evaluation)
  onnx/single_conv.onnx (+ .json)  one Conv node with arange-derived weights
  onnx/residual_concat.onnx (+ .json)  residual + concat topology, torch-evaluated
  onnx/lstm.onnx                   contains an LSTM node (must be rejected)
  onnx/reshape.onnx                contains a Reshape node (must be rejected)

Requires: numpy, torch, onnx, Pillow.  Usage: python3 scripts/make_fixtures.py
"""

import json
import os
import struct

import numpy as np
import onnx
import torch
import torch.nn as nn
from onnx import TensorProto, helper, numpy_helper
from PIL import Image

ROOT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "crates", "core", "fixtures")
SIZE = 32
CLASSES = [
    "red disc",
    "blue disc",
    "green square",
    "red square",
    "yellow ring",
    "blue horizontal stripes",
    "green vertical stripes",
    "white cross",
    "yellow triangle",
    "blue-yellow checkerboard",
]

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 70, 230),
    "yellow": (230, 210, 40),
    "white": (235, 235, 235),
}


def jitter(rng, rgb, amount=25):
    return np.clip(np.array(rgb) + rng.integers(-amount, amount + 1, 3), 0, 255)


def render(label, rng):
    bg = rng.integers(0, 70, 3)
    img = np.ones((SIZE, SIZE, 3)) * bg + rng.normal(0, 10, (SIZE, SIZE, 3))
    yy, xx = np.mgrid[0:SIZE, 0:SIZE]
    cx, cy = rng.uniform(10, 22, 2)
    r = rng.uniform(6, 10)
    name = CLASSES[label]
    if name.endswith("disc"):
        m = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        img[m] = jitter(rng, COLORS[name.split()[0]])
    elif name.endswith("square"):
        m = (np.abs(xx - cx) <= r * 0.85) & (np.abs(yy - cy) <= r * 0.85)
        img[m] = jitter(rng, COLORS[name.split()[0]])
    elif name == "yellow ring":
        d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        m = (d <= r) & (d >= r - 3)
        img[m] = jitter(rng, COLORS["yellow"])
    elif name == "blue horizontal stripes":
        period = rng.integers(4, 7)
        m = ((yy + rng.integers(0, period)) % period) < period // 2
        img[m] = jitter(rng, COLORS["blue"])
    elif name == "green vertical stripes":
        period = rng.integers(4, 7)
        m = ((xx + rng.integers(0, period)) % period) < period // 2
        img[m] = jitter(rng, COLORS["green"])
    elif name == "white cross":
        w = rng.uniform(1.5, 3)
        m = ((np.abs(xx - cx) <= w) & (np.abs(yy - cy) <= r)) | ((np.abs(yy - cy) <= w) & (np.abs(xx - cx) <= r))
        img[m] = jitter(rng, COLORS["white"])
    elif name == "yellow triangle":
        top = cy - r
        m = (yy >= top) & (yy <= cy + r) & (np.abs(xx - cx) <= (yy - top) * 0.6)
        img[m] = jitter(rng, COLORS["yellow"])
    elif name == "blue-yellow checkerboard":
        cell = rng.integers(3, 6)
        ox, oy = rng.integers(0, cell, 2)
        m = (((xx + ox) // cell) + ((yy + oy) // cell)) % 2 == 0
        img[m] = jitter(rng, COLORS["blue"])
        img[~m] = jitter(rng, COLORS["yellow"])
    else:
        raise ValueError(name)
    return np.clip(img, 0, 255).astype(np.uint8)


def make_set(n_per_class, seed):
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for label in range(len(CLASSES)):
        for _ in range(n_per_class):
            xs.append(render(label, rng))
            ys.append(label)
    return np.stack(xs), np.array(ys)


def to_tensor(batch):
    return torch.tensor(batch, dtype=torch.float32).permute(0, 3, 1, 2) / 255.0


class ToyNet(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 12, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(12)
        self.conv2 = nn.Conv2d(12, 16, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(16)
        self.conv3 = nn.Conv2d(16, 24, 3, padding=1)
        self.bn3 = nn.BatchNorm2d(24)
        self.fc = nn.Linear(24, 10)

    def forward(self, x):
        x = torch.relu(self.bn1(self.conv1(x)))
        x = torch.max_pool2d(x, 2, 2)
        x = torch.relu(self.bn2(self.conv2(x)))
        x = torch.max_pool2d(x, 2, 2)
        x = torch.relu(self.bn3(self.conv3(x)))
        x = x.mean(dim=(2, 3))
        return self.fc(x)


def train():
    torch.manual_seed(7)
    xs, ys = make_set(400, seed=1)
    x = to_tensor(xs)
    y = torch.tensor(ys)
    net = ToyNet()
    opt = torch.optim.Adam(net.parameters(), lr=3e-3, weight_decay=1e-4)
    for epoch in range(12):
        perm = torch.randperm(len(x))
        net.train()
        for i in range(0, len(x), 64):
            idx = perm[i : i + 64]
            opt.zero_grad()
            loss = nn.functional.cross_entropy(net(x[idx]), y[idx])
            loss.backward()
            opt.step()
        net.eval()
        with torch.no_grad():
            acc = (net(x).argmax(1) == y).float().mean().item()
        print(f"epoch {epoch} train acc {acc:.3f}")
    return net


def weight_entries(net):
    """(op, weights) in descriptor order; BatchNorm weights are scale, bias, mean, var."""
    sd = {k: v.detach().numpy().astype(np.float32) for k, v in net.state_dict().items()}
    return sd


def write_toy(net):
    out = os.path.join(ROOT, "toy")
    os.makedirs(out, exist_ok=True)
    sd = weight_entries(net)
    ops = []
    blob = []

    def add(name, kind, inputs, output, weights=(), attrs=None):
        op = {"name": name, "kind": kind, "inputs": inputs, "output": output}
        if weights:
            op["weights"] = [[w, list(sd[w].shape)] for w in weights]
            for w in weights:
                blob.append(sd[w].ravel())
        if attrs:
            op["attrs"] = attrs
        ops.append(op)

    prev = "input"
    for i, (cin, cout) in enumerate([(3, 12), (12, 16), (16, 24)], start=1):
        add(f"conv{i}", "Conv", [prev], f"conv{i}_out", [f"conv{i}.weight", f"conv{i}.bias"],
            {"kernel_shape": [3, 3], "strides": [1, 1], "pads": [1, 1, 1, 1]})
        add(f"bn{i}", "BatchNormalization", [f"conv{i}_out"], f"bn{i}_out",
            [f"bn{i}.weight", f"bn{i}.bias", f"bn{i}.running_mean", f"bn{i}.running_var"],
            {"epsilon": 1e-5})
        add(f"relu{i}", "Relu", [f"bn{i}_out"], f"relu{i}")
        prev = f"relu{i}"
        if i < 3:
            add(f"pool{i}", "MaxPool", [prev], f"pool{i}",
                attrs={"kernel_shape": [2, 2], "strides": [2, 2]})
            prev = f"pool{i}"
    add("gap", "GlobalAveragePool", [prev], "gap")
    add("flatten", "Flatten", ["gap"], "flat", attrs={"axis": 1})
    add("fc", "Gemm", ["flat"], "logits", ["fc.weight", "fc.bias"], {"transB": 1})

    lines = ['format = "neurflow-toy/1"', 'output = "logits"',
             '', '[input]', 'name = "input"', f"shape = [3, {SIZE}, {SIZE}]"]
    for op in ops:
        lines.append("")
        lines.append("[[op]]")
        lines.append(f'name = "{op["name"]}"')
        lines.append(f'kind = "{op["kind"]}"')
        lines.append("inputs = [" + ", ".join(f'"{s}"' for s in op["inputs"]) + "]")
        lines.append(f'output = "{op["output"]}"')
        if "weights" in op:
            lines.append("weights = [" + ", ".join(f'["{w}", {s}]' for w, s in op["weights"]) + "]")
        if "attrs" in op:
            parts = []
            for k, v in op["attrs"].items():
                parts.append(f"{k} = {json.dumps(v)}")
            lines.append("attrs = { " + ", ".join(parts) + " }")
    with open(os.path.join(out, "model.toml"), "w") as f:
        f.write("\n".join(lines) + "\n")
    with open(os.path.join(out, "model.bin"), "wb") as f:
        f.write(np.concatenate(blob).astype("<f4").tobytes())
    return ops


def onnx_model(nodes, inits, in_shape, out_name, out_shape, name, opset=13, batch="N"):
    inp = helper.make_tensor_value_info("input", TensorProto.FLOAT, [batch] + list(in_shape))
    out = helper.make_tensor_value_info(out_name, TensorProto.FLOAT, [batch] + list(out_shape))
    graph = helper.make_graph(nodes, name, [inp], [out], initializer=inits)
    model = helper.make_model(graph, opset_imports=[helper.make_opsetid("", opset)],
                              producer_name="neurflow-fixtures")
    model.ir_version = 8
    return model


def write_toy_onnx(net, ops):
    sd = weight_entries(net)
    nodes, inits = [], []
    for op in ops:
        kind = op["kind"]
        inputs = list(op["inputs"]) + [w for w, _ in op.get("weights", [])]
        attrs = dict(op.get("attrs", {}))
        nodes.append(helper.make_node(kind, inputs, [op["output"]], name=op["name"], **attrs))
        for w, _ in op.get("weights", []):
            inits.append(numpy_helper.from_array(sd[w], name=w))
    model = onnx_model(nodes, inits, [3, SIZE, SIZE], "logits", [10], "toy")
    onnx.checker.check_model(model)
    onnx.save(model, os.path.join(ROOT, "toy", "model.onnx"))


def write_images(net):
    out = os.path.join(ROOT, "toy", "images")
    stats = {}
    for split, n, seed in [("probe", 10, 2), ("heldout", 50, 3)]:
        d = os.path.join(out, split)
        os.makedirs(d, exist_ok=True)
        xs, ys = make_set(n, seed)
        with torch.no_grad():
            pred = net(to_tensor(xs)).argmax(1).numpy()
        stats[split] = float((pred == ys).mean())
        counts = {}
        for img, label in zip(xs, ys):
            i = counts.get(label, 0)
            counts[label] = i + 1
            Image.fromarray(img).save(os.path.join(d, f"c{label}_{i:03d}.png"))
    print("accuracy", stats)
    return stats


def write_expected(net, stats):
    rng = np.random.default_rng(11)
    inputs = [np.ones((3, SIZE, SIZE), np.float32), rng.uniform(0, 1, (3, SIZE, SIZE)).astype(np.float32)]
    with torch.no_grad():
        logits = [net(torch.tensor(x)[None]).numpy()[0].tolist() for x in inputs]
    with open(os.path.join(ROOT, "toy", "expected.json"), "w") as f:
        json.dump({"classes": CLASSES, "accuracy": stats,
                   "inputs": [x.ravel().tolist() for x in inputs], "logits": logits}, f)


def write_onnx_fixtures():
    out = os.path.join(ROOT, "onnx")
    os.makedirs(out, exist_ok=True)

    # single Conv: weight[o,i,y,x] = (o*100 + i*10 + y*3 + x) / 100, bias[o] = o / 10
    w = np.zeros((2, 3, 3, 3), np.float32)
    for o in range(2):
        for i in range(3):
            for y in range(3):
                for x in range(3):
                    w[o, i, y, x] = (o * 100 + i * 10 + y * 3 + x) / 100.0
    b = np.array([0.0, 0.1], np.float32)
    node = helper.make_node("Conv", ["input", "w", "b"], ["out"], name="conv0",
                            kernel_shape=[3, 3], strides=[1, 1], pads=[1, 1, 1, 1])
    m = onnx_model([node], [numpy_helper.from_array(w, "w"), numpy_helper.from_array(b, "b")],
                   [3, 5, 5], "out", [2, 5, 5], "single_conv", opset=11, batch=1)
    onnx.checker.check_model(m)
    onnx.save(m, os.path.join(out, "single_conv.onnx"))
    x = np.arange(75, dtype=np.float32).reshape(1, 3, 5, 5) / 75.0
    y = nn.functional.conv2d(torch.tensor(x), torch.tensor(w), torch.tensor(b), padding=1).numpy()
    with open(os.path.join(out, "single_conv.json"), "w") as f:
        json.dump({"weight_shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist(),
                   "input": x.ravel().tolist(), "output": y.ravel().tolist()}, f)

    # residual + concat block, torch-evaluated
    rng = np.random.default_rng(5)
    def p(*shape):
        return (rng.normal(0, 0.3, shape)).astype(np.float32)
    params = {
        "c0.w": p(4, 3, 3, 3), "c0.b": p(4),
        "ca.w": p(2, 4, 1, 1), "ca.b": p(2),
        "cb.w": p(2, 4, 3, 3), "cb.b": p(2),
        "bn.s": (1 + 0.2 * rng.normal(size=4)).astype(np.float32), "bn.b": p(4),
        "bn.m": p(4), "bn.v": (0.5 + rng.uniform(size=4)).astype(np.float32),
        "fc.w": p(5, 4), "fc.b": p(5),
    }
    nodes = [
        helper.make_node("Conv", ["input", "c0.w", "c0.b"], ["c0"], name="c0", kernel_shape=[3, 3], pads=[1, 1, 1, 1]),
        helper.make_node("Relu", ["c0"], ["r0"], name="r0"),
        helper.make_node("Conv", ["r0", "ca.w", "ca.b"], ["ca"], name="ca", kernel_shape=[1, 1]),
        helper.make_node("Conv", ["r0", "cb.w", "cb.b"], ["cb"], name="cb", kernel_shape=[3, 3], pads=[1, 1, 1, 1]),
        helper.make_node("Concat", ["ca", "cb"], ["cat"], name="cat", axis=1),
        helper.make_node("BatchNormalization", ["cat", "bn.s", "bn.b", "bn.m", "bn.v"], ["bn"], name="bn", epsilon=1e-5),
        helper.make_node("Add", ["bn", "r0"], ["res"], name="res"),
        helper.make_node("Relu", ["res"], ["r1"], name="r1"),
        helper.make_node("AveragePool", ["r1"], ["ap"], name="ap", kernel_shape=[2, 2], strides=[2, 2]),
        helper.make_node("MaxPool", ["ap"], ["mp"], name="mp", kernel_shape=[2, 2], strides=[1, 1]),
        helper.make_node("GlobalAveragePool", ["mp"], ["gap"], name="gap"),
        helper.make_node("Flatten", ["gap"], ["flat"], name="flat", axis=1),
        helper.make_node("Gemm", ["flat", "fc.w", "fc.b"], ["logits"], name="fc", transB=1),
    ]
    inits = [numpy_helper.from_array(v, k) for k, v in params.items()]
    m = onnx_model(nodes, inits, [3, 6, 6], "logits", [5], "residual_concat", opset=17)
    onnx.checker.check_model(m)
    onnx.save(m, os.path.join(out, "residual_concat.onnx"))
    t = {k: torch.tensor(v) for k, v in params.items()}
    x = rng.uniform(-1, 1, (1, 3, 6, 6)).astype(np.float32)
    with torch.no_grad():
        r0 = torch.relu(nn.functional.conv2d(torch.tensor(x), t["c0.w"], t["c0.b"], padding=1))
        ca = nn.functional.conv2d(r0, t["ca.w"], t["ca.b"])
        cb = nn.functional.conv2d(r0, t["cb.w"], t["cb.b"], padding=1)
        cat = torch.cat([ca, cb], 1)
        bn = nn.functional.batch_norm(cat, t["bn.m"], t["bn.v"], t["bn.s"], t["bn.b"], False, 0.0, 1e-5)
        r1 = torch.relu(bn + r0)
        ap = nn.functional.avg_pool2d(r1, 2, 2)
        mp = nn.functional.max_pool2d(ap, 2, 1)
        gap = mp.mean(dim=(2, 3))
        logits = gap @ t["fc.w"].T + t["fc.b"]
    with open(os.path.join(out, "residual_concat.json"), "w") as f:
        json.dump({"input": x.ravel().tolist(), "r0": r0.numpy().ravel().tolist(),
                   "r1": r1.numpy().ravel().tolist(), "logits": logits.numpy()[0].tolist()}, f)

    # unsupported ops
    lstm_w = np.zeros((1, 16, 3), np.float32)
    lstm_r = np.zeros((1, 16, 4), np.float32)
    nodes = [helper.make_node("LSTM", ["input", "W", "R"], ["y"], name="lstm_0", hidden_size=4)]
    m = onnx_model(nodes, [numpy_helper.from_array(lstm_w, "W"), numpy_helper.from_array(lstm_r, "R")],
                   [3], "y", [4], "lstm", opset=13, batch=1)
    onnx.save(m, os.path.join(out, "lstm.onnx"))
    shape = np.array([1, -1], np.int64)
    nodes = [helper.make_node("Reshape", ["input", "shape"], ["y"], name="reshape_0")]
    m = onnx_model(nodes, [numpy_helper.from_array(shape, "shape")], [3, 2, 2], "y", [12], "reshape", opset=13, batch=1)
    onnx.save(m, os.path.join(out, "reshape.onnx"))


def main():
    net = train()
    net.eval()
    ops = write_toy(net)
    write_toy_onnx(net, ops)
    stats = write_images(net)
    write_expected(net, stats)
    write_onnx_fixtures()


if __name__ == "__main__":
    main()
