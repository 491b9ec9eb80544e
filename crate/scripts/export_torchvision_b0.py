"""Export torchvision EfficientNet-B0 backbone weights to safetensors.

Usage:
    python scripts/export_torchvision_b0.py OUT.safetensors [--pretrained] [--probe PROBE.safetensors]

With --pretrained the ImageNet weights are fetched through torchvision (needs
network access once). Place the output at
$FUNDUSBENCH_CACHE/efficientnet_b0.safetensors to use it as the pretrained
backbone. --probe additionally writes a fixed input batch and the expected
eval-mode pooled features, which the nn crate's parity test consumes.
"""
import argparse

import torch
import torchvision
from safetensors.torch import save_file


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--pretrained", action="store_true")
    ap.add_argument("--probe")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    weights = "DEFAULT" if args.pretrained else None
    model = torchvision.models.efficientnet_b0(weights=weights).eval()
    if not args.pretrained:
        # Non-trivial running statistics so the parity check exercises them.
        for m in model.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.running_mean.uniform_(-0.1, 0.1)
                m.running_var.uniform_(0.5, 1.5)
                m.weight.data.uniform_(0.5, 1.5)
                m.bias.data.uniform_(-0.1, 0.1)
    state = {
        k: v.detach().float().contiguous()
        for k, v in model.state_dict().items()
        if k.startswith("features.") and not k.endswith("num_batches_tracked")
    }
    save_file(state, args.out, metadata={"source": "torchvision.efficientnet_b0"})

    if args.probe:
        g = torch.Generator().manual_seed(1234)
        x = torch.rand(2, 3, 64, 64, generator=g) * 2 - 1
        with torch.no_grad():
            feats = model.avgpool(model.features(x)).flatten(1)
        save_file({"input": x.contiguous(), "features": feats.contiguous()}, args.probe)


if __name__ == "__main__":
    main()
