"""Command-line entry point: train, eval, gradcheck, convert-au, predict."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import io as ckpt_io
from . import tensor as T
from .data import (
    OPENFACE_AU_IDS,
    emit_manifest,
    decode_and_resize,
    load_manifest,
    load_samples,
    parse_openface_csv,
)
from .errors import AucvtError, ConfigError
from .gradcheck import run_and_report
from .model import CANONICAL_AU_IDS, EXPRESSIONS, ModelConfig, build_model, load_model_config, save_model_config
from .train import (
    AugmentConfig,
    LossWeights,
    LRSchedule,
    OptimConfig,
    evaluate,
    normalize_for_model,
    train_loop,
)
from .tensor import Tensor

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2


@dataclass
class RunConfig:
    model: ModelConfig
    schedule_base_lr: float
    warmup_epochs: int
    cosine_epochs: int
    steps_per_epoch: Optional[int]
    loss: LossWeights
    optim: OptimConfig
    augment: Optional[AugmentConfig]
    seed: int
    target_manifest: str
    aux_manifest: Optional[str]
    val_manifest: Optional[str]
    checkpoint_dir: str
    raw: dict

    @property
    def config_hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True).encode()
        return hashlib.sha256(canon).hexdigest()[:12]


def load_run_config(path) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        model = ModelConfig.from_dict(raw.get("model", {}))
        model.validate()
        sched = raw.get("schedule", {})
        loss = LossWeights(**raw.get("loss", {}))
        optim = OptimConfig(**raw.get("optimizer", {}))
        aug_raw = raw.get("augment", {})
        augment = None if aug_raw is None else AugmentConfig(
            **{k: tuple(v) if isinstance(v, list) else v for k, v in aug_raw.items()}
        )
        paths = raw.get("paths", {})
        target = paths.get("target_manifest")
        if not target:
            raise ConfigError("paths.target_manifest is required")
        cfg = RunConfig(
            model=model,
            schedule_base_lr=float(sched.get("base_lr", 1e-4)),
            warmup_epochs=int(sched.get("warmup_epochs", 3)),
            cosine_epochs=int(sched.get("cosine_epochs", 7)),
            steps_per_epoch=sched.get("steps_per_epoch"),
            loss=loss,
            optim=optim,
            augment=augment,
            seed=int(raw.get("seed", 0)),
            target_manifest=target,
            aux_manifest=paths.get("aux_manifest"),
            val_manifest=paths.get("val_manifest"),
            checkpoint_dir=paths.get("checkpoint_dir", "checkpoints"),
            raw=raw,
        )
    except TypeError as exc:
        raise ConfigError(f"bad config field: {exc}") from None
    for p in (cfg.target_manifest, cfg.aux_manifest, cfg.val_manifest):
        if p is not None and not os.path.exists(p):
            raise ConfigError(f"referenced manifest does not exist: {p}")
    return cfg


def _write_history(path, history, header: str):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {header}\n")
        fh.write("step,lr,loss,ce,bce,acc,f1\n")
        for row in history:
            fh.write(
                f"{row.step},{row.lr:.6f},{row.loss:.6f},{row.ce:.6f},{row.bce:.6f},{row.acc:.6f},{row.f1:.6f}\n"
            )


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.raw["seed"] = args.seed
    short_edge = cfg.model.input_h
    target = load_samples(load_manifest(cfg.target_manifest, source="target"), short_edge)
    aux = None
    if cfg.aux_manifest:
        aux = load_samples(load_manifest(cfg.aux_manifest, source="auxiliary"), short_edge)
    steps_per_epoch = cfg.steps_per_epoch or max(1, -(-len(target) // cfg.optim.batch_size))
    sched = LRSchedule(
        base_lr=cfg.schedule_base_lr,
        warmup_epochs=cfg.warmup_epochs,
        cosine_epochs=cfg.cosine_epochs,
        steps_per_epoch=steps_per_epoch,
    )
    params, model = build_model(cfg.model, cfg.seed)

    start_step = 0
    rng = None
    momentum_state = None
    ckpt_dir = cfg.checkpoint_dir
    if args.resume and os.path.exists(os.path.join(ckpt_dir, ckpt_io.MANIFEST_FILE)):
        momentum_state = ckpt_io.load_checkpoint(ckpt_dir, params)
        state = ckpt_io.load_extra_state(ckpt_dir) or {}
        start_step = int(state.get("next_step", 0))
        if "rng_state" in state:
            rng = np.random.default_rng(cfg.seed)
            rng.bit_generator.state = state["rng_state"]
        print(f"resuming from step {start_step}")

    header = f"config={cfg.config_hash} seed={cfg.seed}"

    def on_epoch_end(epoch, step, loop_rng, mom_state):
        ckpt_io.save_checkpoint(
            ckpt_dir,
            params,
            momentum_state=mom_state,
            extra_state={
                "epoch": epoch,
                "next_step": step + 1,
                "rng_state": loop_rng.bit_generator.state,
                "config_hash": cfg.config_hash,
                "seed": cfg.seed,
            },
        )
        save_model_config(os.path.join(ckpt_dir, ckpt_io.CONFIG_FILE), cfg.model)

    history = train_loop(
        model,
        params,
        target,
        aux,
        sched,
        cfg.loss,
        cfg.optim,
        cfg.augment,
        cfg.seed,
        on_epoch_end=on_epoch_end,
        start_step=start_step,
        rng=rng,
        momentum_state=momentum_state,
    )
    os.makedirs(ckpt_dir, exist_ok=True)
    _write_history(os.path.join(ckpt_dir, "history.csv"), history, header)

    eval_set = target
    split = "train"
    if cfg.val_manifest:
        eval_set = load_samples(load_manifest(cfg.val_manifest, source="target"), short_edge)
        split = "val"
    metrics = evaluate(model, params, eval_set, cfg.optim.batch_size)
    print(f"# {header}")
    print(f"final {split} macro_f1={metrics['macro_f1']:.6f} accuracy={metrics['accuracy']:.6f}")
    return EXIT_OK


def _load_checkpoint_model(ckpt_dir):
    cfg_path = os.path.join(ckpt_dir, ckpt_io.CONFIG_FILE)
    if not os.path.exists(cfg_path):
        raise ConfigError(f"no model config in checkpoint dir: {cfg_path}")
    model_cfg = load_model_config(cfg_path)
    params, model = build_model(model_cfg, seed=0)
    ckpt_io.load_checkpoint(ckpt_dir, params)
    state = ckpt_io.load_extra_state(ckpt_dir) or {}
    return model, params, state


def cmd_eval(args) -> int:
    model, params, state = _load_checkpoint_model(args.checkpoint)
    manifest = load_manifest(args.manifest)
    if not manifest.samples:
        raise ConfigError(f"empty manifest: {args.manifest}")
    samples = load_samples(manifest, model.cfg.input_h)
    metrics = evaluate(model, params, samples)
    header = f"config={state.get('config_hash', 'unknown')} seed={state.get('seed', 'unknown')}"
    print(f"# {header}")
    print(json.dumps({"macro_f1": metrics["macro_f1"], "accuracy": metrics["accuracy"]}, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    return run_and_report(seed=args.seed or 0, corrupt=args.corrupt)


def cmd_convert_au(args) -> int:
    rows = parse_openface_csv(args.openface_csv)
    out_rows = []
    for frame_id, vec in rows:
        rel = os.path.join(args.image_dir, f"frame_{frame_id:06d}.png")
        out_rows.append((rel, None, vec))
    digest = hashlib.sha256(os.path.abspath(args.openface_csv).encode()).hexdigest()[:12]
    emit_manifest(
        args.out_manifest,
        out_rows,
        mask=OPENFACE_AU_IDS,
        header_comment=f"config={digest} seed=0 source=openface",
    )
    print(f"wrote {len(out_rows)} rows to {args.out_manifest}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, params, _ = _load_checkpoint_model(args.checkpoint)
    image = decode_and_resize(args.image, model.cfg.input_h)
    with T.no_grad():
        out = model.forward(Tensor(normalize_for_model(image)[None]), params)
    emotion = EXPRESSIONS[int(np.argmax(out.emotion_logits.data[0]))]
    probs = 1.0 / (1.0 + np.exp(-out.au_logits.data[0]))
    result = {
        "expression": emotion,
        "au_probabilities": {f"AU{au}": round(float(p), 6) for au, p in zip(CANONICAL_AU_IDS, probs)},
    }
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aucvt", description="AU-supervised convolutional ViT toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a run-config JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the finite-difference verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("convert-au", help="OpenFace CSV -> canonical manifest")
    p.add_argument("--openface-csv", required=True, dest="openface_csv")
    p.add_argument("--image-dir", required=True, dest="image_dir")
    p.add_argument("--out", required=True, dest="out_manifest")
    p.set_defaults(fn=cmd_convert_au)

    p = sub.add_parser("predict", help="classify one image and report AU probabilities")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(fn=cmd_predict)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AucvtError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
