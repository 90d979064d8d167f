"""Reference forward passes for the fixture weights, written with PyTorch.

Weights are drawn from a splitmix64 stream so the Rust test can rebuild them
bit for bit without shipping multi-megabyte weight files. Run from the
repository root:

    python3 tools/reference_forward.py crates/core/tests/fixtures
"""

import json
import math
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

GRID = (32, 32, 16)
BN_EPS = 1e-3
SCALE_NORMALIZER = 10.0
MASK = (1 << 64) - 1


class SplitMix:
    def __init__(self, seed):
        self.state = seed & MASK

    def next(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        return z ^ (z >> 31)

    def unit(self):
        return (self.next() >> 40) / float(1 << 24)


def encoder_shapes(filters, fc1, descriptor):
    out, cin = [], 1
    for l, f in enumerate(filters, 1):
        out.append((f"enc.conv{l}.weight", (f, cin, 3, 3, 3)))
        out.append((f"enc.conv{l}.bias", (f,)))
        for p in ("gamma", "beta", "mean", "var"):
            out.append((f"enc.bn{l}.{p}", (f,)))
        cin = f
    flat = filters[2] * (GRID[0] // 4) * (GRID[1] // 4) * (GRID[2] // 4) + 3
    out += [
        ("enc.fc1.weight", (fc1, flat)),
        ("enc.fc1.bias", (fc1,)),
        ("enc.fc2.weight", (descriptor, fc1)),
        ("enc.fc2.bias", (descriptor,)),
    ]
    return out


SHAPES = {
    "segmap-v1": encoder_shapes((32, 64, 64), 512, 64),
    "segmini-v1": encoder_shapes((16, 32, 32), 256, 32),
    "decoder-v1": [("dec.fc.weight", (32 * 64, 64)), ("dec.fc.bias", (32 * 64,))]
    + [
        item
        for l, (co, ci) in enumerate([(64, 64), (32, 64), (1, 32)], 1)
        for item in ((f"dec.deconv{l}.weight", (co, ci, 3, 3, 3)), (f"dec.deconv{l}.bias", (co,)))
    ],
    "semantics-v1": [
        ("sem.fc1.weight", (32, 64)),
        ("sem.fc1.bias", (32,)),
        ("sem.fc2.weight", (3, 32)),
        ("sem.fc2.bias", (3,)),
    ],
}


def fixture_weights(arch, seed):
    rng = SplitMix(seed)
    out = {}
    for name, dims in SHAPES[arch]:
        n = math.prod(dims)
        if name.endswith(".weight"):
            a = math.sqrt(6.0 / ((dims[0] + dims[1]) * math.prod(dims[2:])))
            vals = [(2.0 * rng.unit() - 1.0) * a for _ in range(n)]
        elif name.endswith(".gamma") or name.endswith(".var"):
            vals = [0.5 + rng.unit() for _ in range(n)]
        else:
            vals = [(2.0 * rng.unit() - 1.0) * 0.1 for _ in range(n)]
        t = np.asarray(vals, dtype=np.float64).astype(np.float32).astype(np.float64)
        out[name] = torch.from_numpy(t.reshape(dims))
    return out


def fixture_input(seed):
    rng = SplitMix(seed)
    occ = np.zeros(GRID, dtype=np.uint8)
    cx, cy, cz = 15.5, 13.0, 6.0
    for x in range(GRID[0]):
        for y in range(GRID[1]):
            for z in range(GRID[2]):
                r = ((x - cx) / 11.0) ** 2 + ((y - cy) / 6.0) ** 2 + ((z - cz) / 5.0) ** 2
                if abs(r - 1.0) < 0.25 and rng.unit() < 0.7:
                    occ[x, y, z] = 1
    return occ


def describe(w, occ, extent):
    v = torch.from_numpy(occ.astype(np.float64))[None, None]
    for l in (1, 2, 3):
        v = F.conv3d(v, w[f"enc.conv{l}.weight"], w[f"enc.conv{l}.bias"], padding=1)
        v = F.batch_norm(
            v,
            w[f"enc.bn{l}.mean"],
            w[f"enc.bn{l}.var"],
            w[f"enc.bn{l}.gamma"],
            w[f"enc.bn{l}.beta"],
            training=False,
            eps=BN_EPS,
        )
        v = F.relu(v)
        if l < 3:
            v = F.max_pool3d(v, 2)
    scale = torch.tensor([e / SCALE_NORMALIZER for e in extent], dtype=torch.float64)
    h = torch.cat([v.flatten(), scale])
    h = F.relu(F.linear(h, w["enc.fc1.weight"], w["enc.fc1.bias"]))
    return F.linear(h, w["enc.fc2.weight"], w["enc.fc2.bias"])


def decode(w, d):
    h = F.relu(F.linear(d, w["dec.fc.weight"], w["dec.fc.bias"]))
    v = h.reshape(1, 64, 4, 4, 2)
    for l in (1, 2, 3):
        # conv_transpose3d wants [in][out] kernels; the stride-2 output has one
        # extra trailing voxel per axis that the network drops.
        k = w[f"dec.deconv{l}.weight"].transpose(0, 1)
        n = v.shape[2:]
        v = F.conv_transpose3d(v, k, w[f"dec.deconv{l}.bias"], stride=2)
        v = v[:, :, : 2 * n[0], : 2 * n[1], : 2 * n[2]]
        if l < 3:
            v = F.relu(v)
    return torch.sigmoid(v).flatten()


def classify(w, d):
    h = F.relu(F.linear(d, w["sem.fc1.weight"], w["sem.fc1.bias"]))
    return F.linear(h, w["sem.fc2.weight"], w["sem.fc2.bias"])


def main():
    out_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/fixtures")
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = {"segmap-v1": 11, "segmini-v1": 12, "decoder-v1": 13, "semantics-v1": 14}
    occ = fixture_input(15)
    extent = [6.3, 3.1, 2.4]
    with torch.no_grad():
        weights = {a: fixture_weights(a, s) for a, s in seeds.items()}
        desc64 = describe(weights["segmap-v1"], occ, extent)
        desc32 = describe(weights["segmini-v1"], occ, extent)
        # Downstream heads consume the descriptor as it is stored, in f32.
        d = torch.from_numpy(desc64.numpy().astype(np.float32).astype(np.float64))
        recon = decode(weights["decoder-v1"], d)
        logits = classify(weights["semantics-v1"], d)
    fixture = {
        "weight_seeds": seeds,
        "input_seed": 15,
        "original_extent": extent,
        "occupied": [int(i) for i in np.flatnonzero(occ.flatten())],
        "descriptor_segmap": desc64.tolist(),
        "descriptor_segmini": desc32.tolist(),
        "logits": logits.tolist(),
        "decoded_file": "forward_decoded.f32",
    }
    (out_dir / "forward_reference.json").write_text(json.dumps(fixture, indent=1) + "\n")
    recon.numpy().astype("<f4").tofile(out_dir / "forward_decoded.f32")


if __name__ == "__main__":
    main()
