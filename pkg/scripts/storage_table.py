#!/usr/bin/env python3
"""Adapter file size against base checkpoint size, per rank, for the full-size and desk models."""

from loraudio.lora import adapter_bytes, init_adapters
from loraudio.senet import SENetConfig, build_model, checkpoint_bytes

MODELS = {
    "full": SENetConfig(),
    "desk": SENetConfig(stem_channels=(8, 16, 32), se_reduction=2),
}


def run():
    print(f"{'model':6} {'rank':>4} {'params':>9} {'base B':>10} {'adapter B':>10} {'ratio':>8}")
    for label, cfg in MODELS.items():
        model = build_model(cfg, 0)
        base = len(checkpoint_bytes(model))
        for rank in (1, 2, 4, 8, 16):
            aset = init_adapters(model, cfg.default_adapter_targets(), rank, 0, clamp_rank=True)
            size = len(adapter_bytes(aset))
            print(f"{label:6} {rank:>4} {model.num_params():>9} {base:>10} {size:>10} {size / base:>8.4f}")


if __name__ == "__main__":
    run()
