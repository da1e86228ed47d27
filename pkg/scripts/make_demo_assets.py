"""Build the committed demo assets: a small trained digit classifier in the
portable model format plus an evaluation dataset with frozen reference
labels.

The classifier is trained on the scikit-learn 8x8 digits, upscaled 3x and
padded to 28x28 so the network shape matches the classic grayscale-digit
setup. Reference labels are the float32 predictions of the exported
network itself, frozen at export time; agreement sweeps measure drift from
this reference, not absolute accuracy.

Run from the repository root:  python3 scripts/make_demo_assets.py
"""

import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.datasets import load_digits

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from certinfer.model import F32Tensor, Graph, Node, save_dataset, save_model  # noqa: E402

ASSETS = Path(__file__).resolve().parent.parent / "assets"

EPOCHS = 20
TEST_EVERY = 6  # every 6th sample is held out and exported


def make_inputs() -> tuple:
    digits = load_digits()
    imgs = digits.images.astype(np.float32) / 16.0  # 0..16 -> 0..1
    big = np.kron(imgs, np.ones((1, 3, 3), dtype=np.float32))  # 8x8 -> 24x24
    big = np.pad(big, ((0, 0), (2, 2), (2, 2)))  # -> 28x28
    labels = digits.target.astype(np.int64)
    test_mask = np.arange(len(big)) % TEST_EVERY == 0
    return big[~test_mask], labels[~test_mask], big[test_mask], labels[test_mask]


class Net(nn.Module):
    def __init__(self):
        super().__init__()
        self.c1 = nn.Conv2d(1, 8, 5, padding=2)
        self.c2 = nn.Conv2d(8, 16, 5, padding=2)
        self.fc = nn.Linear(16 * 7 * 7, 10)

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.c1(x)), 2)
        x = F.max_pool2d(F.relu(self.c2(x)), 2)
        return self.fc(x.flatten(1))


def train(xs, ys) -> Net:
    torch.manual_seed(0)
    torch.set_num_threads(1)
    net = Net()
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    data = torch.from_numpy(xs).unsqueeze(1)
    target = torch.from_numpy(ys)
    idx = np.arange(len(xs))
    rng = np.random.default_rng(0)
    for epoch in range(EPOCHS):
        rng.shuffle(idx)
        total = 0.0
        for start in range(0, len(idx), 64):
            batch = torch.from_numpy(idx[start : start + 64])
            opt.zero_grad()
            loss = F.cross_entropy(net(data[batch]), target[batch])
            loss.backward()
            opt.step()
            total += float(loss) * len(batch)
        print(f"epoch {epoch}: loss {total / len(idx):.4f}")
    net.eval()
    return net


def export_graph(net: Net) -> Graph:
    def t(tensor):
        arr = tensor.detach().numpy().astype(np.float32)
        return F32Tensor(tuple(arr.shape), arr.ravel().tolist())

    inits = {
        "c1w": t(net.c1.weight),
        "c1b": t(net.c1.bias),
        "c2w": t(net.c2.weight),
        "c2b": t(net.c2.bias),
        "fcw": t(net.fc.weight),
        "fcb": t(net.fc.bias),
    }
    nodes = [
        Node("c1", "Conv2D", ("x", "c1w", "c1b"), ("t1",), {"pads": [2, 2, 2, 2]}),
        Node("r1", "ReLU", ("t1",), ("t2",), {}),
        Node("p1", "MaxPool", ("t2",), ("t3",), {"kernel": [2, 2], "strides": [2, 2]}),
        Node("c2", "Conv2D", ("t3", "c2w", "c2b"), ("t4",), {"pads": [2, 2, 2, 2]}),
        Node("r2", "ReLU", ("t4",), ("t5",), {}),
        Node("p2", "MaxPool", ("t5",), ("t6",), {"kernel": [2, 2], "strides": [2, 2]}),
        Node("fl", "Flatten", ("t6",), ("t7",), {}),
        Node("fc", "Gemm", ("t7", "fcw", "fcb"), ("y",), {}),
    ]
    return Graph(
        name="digits-cnn",
        nodes=nodes,
        initializers=inits,
        inputs=[("x", (1, 1, 28, 28))],
        outputs=[("y", (1, 10))],
    )


def main():
    train_x, train_y, test_x, test_y = make_inputs()
    print(f"training on {len(train_x)}, exporting {len(test_x)} evaluation samples")
    net = train(train_x, train_y)

    with torch.no_grad():
        logits = net(torch.from_numpy(test_x).unsqueeze(1)).numpy()
    ref_top1 = logits.argmax(axis=1)
    acc = float((ref_top1 == test_y).mean())
    sorted_logits = np.sort(logits, axis=1)
    margins = sorted_logits[:, -1] - sorted_logits[:, -2]
    print(f"held-out accuracy vs true digit labels: {acc:.4f}")
    print(f"reference margins: min {margins.min():.4g}, median {np.median(margins):.4g}")

    graph = export_graph(net)
    save_model(graph, ASSETS / "digits-cnn")
    save_dataset(
        ASSETS / "digits-data",
        (1, 1, 28, 28),
        [row.ravel().tolist() for row in test_x],
        ref_top1.tolist(),
        preprocessing={
            "source": "scikit-learn load_digits",
            "scale": "pixel / 16",
            "upsample": "3x nearest (kron)",
            "pad": "2 px each side, zeros",
            "holdout": f"every {TEST_EVERY}th sample",
        },
        labels_source="float32 forward pass of the exported network",
    )
    print(f"wrote {ASSETS / 'digits-cnn'} and {ASSETS / 'digits-data'}")


if __name__ == "__main__":
    main()
