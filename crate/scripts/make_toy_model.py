"""Train the 2-16-16-2 toy classifier stored in fixtures/toy.

Writes model.json plus ATRC input and label files. Re-running with the same
seed reproduces the fixture up to torch CPU kernel determinism.

    python3 scripts/make_toy_model.py [--out fixtures/toy] [--seed 7]
"""

import argparse
import json
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

DTYPE_F32, DTYPE_F64 = 1, 2


def write_atrc(path, matrix, dtype_code):
    matrix = np.asarray(matrix)
    rows, cols = matrix.shape
    header = b"ATRC" + struct.pack("<HBBQQ4x", 1, dtype_code, 0, rows, cols)
    np_dtype = "<f4" if dtype_code == DTYPE_F32 else "<f8"
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(matrix, dtype=np_dtype).tobytes())


def two_moons(n, noise, rng):
    half = n // 2
    t_a = rng.uniform(0.0, np.pi, half)
    t_b = rng.uniform(0.0, np.pi, n - half)
    a = np.stack([np.cos(t_a), np.sin(t_a)], axis=1)
    b = np.stack([1.0 - np.cos(t_b), 0.5 - np.sin(t_b)], axis=1)
    x = np.concatenate([a, b]) + rng.normal(0.0, noise, (n, 2))
    y = np.concatenate([np.zeros(half, dtype=int), np.ones(n - half, dtype=int)])
    order = rng.permutation(n)
    return x[order], y[order]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="fixtures/toy")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--train", type=int, default=600)
    parser.add_argument("--test", type=int, default=200)
    parser.add_argument("--noise", type=float, default=0.2)
    parser.add_argument("--dropout", type=float, default=0.3)
    parser.add_argument("--epochs", type=int, default=600)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    torch.manual_seed(args.seed)
    x_train, y_train = two_moons(args.train, args.noise, rng)
    x_test, y_test = two_moons(args.test, args.noise, rng)

    net = nn.Sequential(
        nn.Linear(2, 16),
        nn.ReLU(),
        nn.Linear(16, 16),
        nn.ReLU(),
        nn.Dropout(args.dropout),
        nn.Linear(16, 2),
    ).double()
    opt = torch.optim.Adam(net.parameters(), lr=0.01)
    xt = torch.from_numpy(x_train)
    yt = torch.from_numpy(y_train)
    for _ in range(args.epochs):
        opt.zero_grad()
        loss = nn.functional.cross_entropy(net(xt), yt)
        loss.backward()
        opt.step()

    net.eval()
    with torch.no_grad():
        train_acc = (net(xt).argmax(1) == yt).double().mean().item()
        test_acc = (net(torch.from_numpy(x_test)).argmax(1).numpy() == y_test).mean()

    layers = []
    for module in net:
        if isinstance(module, nn.Linear):
            layers.append({
                "kind": "dense",
                "weights": module.weight.detach().numpy().tolist(),
                "bias": module.bias.detach().numpy().tolist(),
            })
        elif isinstance(module, nn.ReLU):
            layers.append({"kind": "relu"})
        elif isinstance(module, nn.Dropout):
            layers.append({"kind": "dropout", "rate": module.p})
    layers.append({"kind": "softmax"})

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "model.json", "w") as fh:
        json.dump({"input_dim": 2, "num_classes": 2, "layers": layers}, fh)
    write_atrc(out / "train.atrc", x_train, DTYPE_F64)
    write_atrc(out / "train_labels.atrc", y_train[:, None], DTYPE_F32)
    write_atrc(out / "test.atrc", x_test, DTYPE_F64)
    write_atrc(out / "test_labels.atrc", y_test[:, None], DTYPE_F32)
    print(f"train accuracy {train_acc:.3f}, test accuracy {test_acc:.3f}")


if __name__ == "__main__":
    main()
