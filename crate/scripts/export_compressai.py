#!/usr/bin/env python3
"""Export CompressAI scale-hyperprior weights to a safetensors archive.

Pretrained (needs network access to the CompressAI model zoo):

    python scripts/export_compressai.py pretrained --quality 5 --out teacher_q5.safetensors

Random weights plus a probe forward pass, used as a cross-check fixture:

    python scripts/export_compressai.py random --n 8 --m 12 --seed 0 \
        --out crates/core/tests/fixtures/compressai_small.safetensors

Single-layer conv and transposed-conv cases over a range of input sizes:

    python scripts/export_compressai.py layers --out crates/core/tests/fixtures/conv_cases.safetensors
"""
import argparse

import torch
from safetensors.torch import save_file


def state_dict(model):
    return {k: v.detach().contiguous().clone() for k, v in model.state_dict().items() if v.numel() > 0}


def pretrained(args):
    from compressai.zoo import bmshj2018_hyperprior

    model = bmshj2018_hyperprior(quality=args.quality, metric="mse", pretrained=True).eval()
    save_file(state_dict(model), args.out, metadata={"source": f"bmshj2018-hyperprior-mse-q{args.quality}"})


def random(args):
    from compressai.models import ScaleHyperprior

    torch.manual_seed(args.seed)
    model = ScaleHyperprior(args.n, args.m).double().eval()
    with torch.no_grad():
        eb = model.entropy_bottleneck
        # move the medians off zero so the median-centred rounding is exercised
        shift = 0.6 * torch.rand(eb.quantiles.shape[0], 1, 1, dtype=torch.float64) - 0.3
        eb.quantiles.add_(shift)
        # keep scales above the floor for a meaningful comparison
        model.h_s[4].bias.add_(0.5)
        x = torch.rand(1, 3, 64, 64, dtype=torch.float64)
        out = model(x)
        y = model.g_a(x)
        y_hat = torch.round(y)
    tensors = state_dict(model)
    tensors.update(
        {
            "probe.x": x,
            "probe.y": y,
            "probe.y_hat": y_hat,
            "probe.x_hat": out["x_hat"],
            "probe.y_likelihoods": out["likelihoods"]["y"],
            "probe.z_likelihoods": out["likelihoods"]["z"],
            "probe.aux_loss": model.aux_loss().reshape(1).detach(),
        }
    )
    save_file({k: v.contiguous() for k, v in tensors.items()}, args.out)


def layers(args):
    import torch.nn.functional as F

    torch.manual_seed(args.seed)
    tensors = {}
    for size in (1, 2, 3, 4, 5, 8, 13, 16):
        for kernel, stride in ((3, 1), (5, 2)):
            name = f"s{size}_k{kernel}_st{stride}"
            x = torch.randn(1, 4, size, size + 1, dtype=torch.float64)
            w = torch.randn(6, 4, kernel, kernel, dtype=torch.float64)
            wt = torch.randn(4, 6, kernel, kernel, dtype=torch.float64)
            b = torch.randn(6, dtype=torch.float64)
            tensors[f"{name}.x"] = x
            tensors[f"{name}.bias"] = b
            tensors[f"{name}.conv.weight"] = w
            tensors[f"{name}.conv.out"] = F.conv2d(x, w, b, stride=stride, padding=kernel // 2)
            tensors[f"{name}.deconv.weight"] = wt
            tensors[f"{name}.deconv.out"] = F.conv_transpose2d(
                x, wt, b, stride=stride, padding=kernel // 2, output_padding=stride - 1
            )
    save_file({k: v.contiguous() for k, v in tensors.items()}, args.out)


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="cmd", required=True)
    a = sub.add_parser("pretrained")
    a.add_argument("--quality", type=int, required=True, choices=range(1, 9))
    a.add_argument("--out", required=True)
    a.set_defaults(func=pretrained)
    b = sub.add_parser("random")
    b.add_argument("--n", type=int, default=8)
    b.add_argument("--m", type=int, default=12)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=random)
    c = sub.add_parser("layers")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=layers)
    args = p.parse_args()
    args.func(args)


if __name__ == "__main__":
    main()
