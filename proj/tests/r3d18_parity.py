#!/usr/bin/env python3
"""Checks the residual backbone against torchvision's R3D-18.

A randomly initialised torchvision model with randomised batch-norm
statistics is exported with tools/export_r3d18.py, imported by the
r3d18_embed helper, and both embed the same clip.
"""

import importlib.util
import os
import subprocess
import sys
import tempfile

import numpy as np
import torch
from torchvision.models.video import r3d_18

MEAN = torch.tensor([0.43216, 0.394666, 0.37645]).view(1, 3, 1, 1, 1)
STD = torch.tensor([0.22803, 0.22145, 0.216989]).view(1, 3, 1, 1, 1)


def main():
    embed_bin, exporter = sys.argv[1], sys.argv[2]
    spec = importlib.util.spec_from_file_location("export_r3d18", exporter)
    export = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(export)

    torch.manual_seed(0)
    model = r3d_18(weights=None)
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm3d):
            m.running_mean.uniform_(-0.2, 0.2)
            m.running_var.uniform_(0.5, 2.0)
            m.weight.data.uniform_(0.5, 1.5)
            m.bias.data.uniform_(-0.2, 0.2)
    model.fc = torch.nn.Identity()
    model.eval().double()

    t, h, w = 8, 32, 32
    clip = torch.rand(1, 3, t, h, w, dtype=torch.float32)
    with torch.no_grad():
        want = model(((clip.double() - MEAN) / STD)).numpy().ravel()

    with tempfile.TemporaryDirectory() as d:
        weights = os.path.join(d, "r3d18.weights")
        export.write(weights, export.convert(model.float().state_dict()))
        clip_path = os.path.join(d, "clip.f32")
        clip.numpy().tofile(clip_path)
        out = os.path.join(d, "emb.f64")
        subprocess.run([embed_bin, weights, clip_path, str(t), str(h), str(w), out], check=True)
        got = np.fromfile(out, dtype=np.float64)

    err = np.max(np.abs(got - want)) / max(1e-12, np.max(np.abs(want)))
    print(f"embedding size {got.size}, max relative deviation {err:.2e}")
    # Weights pass through float32, so agreement is limited to single precision.
    return 0 if got.size == 512 and err < 1e-4 else 1


if __name__ == "__main__":
    sys.exit(main())
