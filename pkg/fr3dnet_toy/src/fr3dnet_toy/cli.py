"""fr3dnet-toy: train / extract / finetune over geometry-image PNGs.

All subcommands take a JSON manifest listing {"image", "label", "scan",
"subject"} records. Checkpoints bundle the model weights with the
architecture parameters so extract/finetune can rebuild the network.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import torch

from .data import load_dataset
from .f3df import write_features
from .net import GeometryImageNet, NetSpec
from .train import TrainConfig, extract_features, fine_tune, train


def save_checkpoint(model: GeometryImageNet, path) -> None:
    torch.save({"spec": dataclasses.asdict(model.spec),
                "state": model.state_dict()}, path)


def load_checkpoint(path) -> GeometryImageNet:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model = GeometryImageNet(NetSpec(**payload["spec"]))
    model.load_state_dict(payload["state"])
    model.eval()
    return model


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        momentum=args.momentum,
        seed=args.seed,
        early_stop_train_acc=args.early_stop,
    )


def cmd_train(args) -> int:
    dataset = load_dataset(args.manifest)
    spec = NetSpec(n_classes=dataset.n_classes, first_kernel=args.kernel,
                   base_width=args.base_width, fc6_width=args.fc6_width,
                   dropout=args.dropout)
    result = train(dataset, spec, _train_config(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out / "model.pt")
    result.save_metrics(out / "metrics.json")
    final = result.history[-1]
    print(f"trained {len(result.history)} epochs; "
          f"train_acc={final['train_acc']:.3f} val_acc={final['val_acc']}")
    return 0


def cmd_extract(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.manifest)
    values = extract_features(model, dataset.images)
    write_features(args.out, values, dataset.subjects, dataset.scans)
    print(f"wrote {len(values)} x {values.shape[1]} features to {args.out}")
    return 0


def cmd_finetune(args) -> int:
    model = load_checkpoint(args.checkpoint)
    gallery = load_dataset(args.manifest)
    tuned = fine_tune(model, gallery, gallery.n_classes, _train_config(args))
    save_checkpoint(tuned, args.out)
    print(f"fine-tuned head for {gallery.n_classes} classes -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fr3dnet-toy")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--manifest", required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--epochs", type=int, default=50)
        p.add_argument("--batch-size", type=int, default=20)
        p.add_argument("--lr", type=float, default=0.01)
        p.add_argument("--weight-decay", type=float, default=5e-4)
        p.add_argument("--momentum", type=float, default=0.0)
        p.add_argument("--early-stop", type=float, default=None)

    p = sub.add_parser("train")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--kernel", type=int, default=7, choices=(3, 5, 7, 9))
    p.add_argument("--base-width", type=int, default=32)
    p.add_argument("--fc6-width", type=int, default=2048)
    p.add_argument("--dropout", type=float, default=0.5)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("finetune")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
