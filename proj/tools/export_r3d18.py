#!/usr/bin/env python3
"""Converts torchvision R3D-18 weights into an mvl backbone weight file.

Batch norm is folded into per-channel scale/shift with the running
statistics. The classifier is dropped.

    export_r3d18.py OUT.weights                 # Kinetics-400 weights (downloads)
    export_r3d18.py OUT.weights --state-dict r3d18.pth
"""

import argparse
import json
import struct

import torch

MAGIC = b"MVLWTS01"


def conv(sd, src, dst):
    return [(dst + ".weight", sd[src + ".weight"])]


def bn(sd, src, dst):
    scale = sd[src + ".weight"] / torch.sqrt(sd[src + ".running_var"] + 1e-5)
    shift = sd[src + ".bias"] - sd[src + ".running_mean"] * scale
    return [(dst + ".scale", scale), (dst + ".shift", shift)]


def convert(sd):
    out = conv(sd, "stem.0", "backbone.stem.conv") + bn(sd, "stem.1", "backbone.stem.bn")
    for layer in range(1, 5):
        for block in range(2):
            src = f"layer{layer}.{block}"
            dst = f"backbone.layer{layer}.{block}"
            out += conv(sd, src + ".conv1.0", dst + ".conv1") + bn(sd, src + ".conv1.1", dst + ".bn1")
            out += conv(sd, src + ".conv2.0", dst + ".conv2") + bn(sd, src + ".conv2.1", dst + ".bn2")
            if src + ".downsample.0.weight" in sd:
                out += conv(sd, src + ".downsample.0", dst + ".downsample.conv")
                out += bn(sd, src + ".downsample.1", dst + ".downsample.bn")
    return out


def write(path, tensors):
    header = {
        "dtype": "float32",
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
    }
    text = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(text)))
        f.write(text)
        for _, t in tensors:
            f.write(t.detach().to(torch.float32).contiguous().numpy().tobytes())


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("out")
    ap.add_argument("--state-dict", help="saved torchvision r3d_18 state dict")
    args = ap.parse_args()
    if args.state_dict:
        sd = torch.load(args.state_dict, map_location="cpu")
    else:
        from torchvision.models.video import R3D_18_Weights, r3d_18

        sd = r3d_18(weights=R3D_18_Weights.KINETICS400_V1).state_dict()
    tensors = convert(sd)
    write(args.out, tensors)
    print(f"{args.out}: {len(tensors)} tensors, {sum(t.numel() for _, t in tensors)} values")


if __name__ == "__main__":
    main()
