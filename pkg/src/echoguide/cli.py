"""Command-line entry point wiring configs to the pipelines.

Commands: phantom-gen, pretrain, finetune, eval, probe, phase, bench,
visualize, ablate, config-dump. Configuration comes from an optional JSON
file (see `echoguide config-dump` for the schema with defaults); flags and
`--set section.key=value` overrides win over file values. Exit codes:
0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from dataclasses import asdict, replace
from pathlib import Path

from echoguide.config import ConfigError, ExperimentConfig, apply_overrides, load_config

OUT_ENV = "ECHOGUIDE_OUT"
ABLATE_AXES = (
    "seq_len",
    "strategy",
    "mask_type",
    "mask_ratio",
    "arch_depth",
    "arch_width",
    "arch_heads",
    "arch_mlp",
)


class UsageError(Exception):
    """Bad invocation: missing paths, invalid flag combinations."""


def _resolve_out(out: str | None, command: str) -> Path:
    if out:
        return Path(out)
    root = os.environ.get(OUT_ENV)
    if not root:
        raise UsageError(f"--out not given and ${OUT_ENV} is unset")
    return Path(root) / command


def _load(args) -> ExperimentConfig:
    config = load_config(getattr(args, "config", None))
    overrides = getattr(args, "set", None) or []
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def _data_split(root: str | None):
    from echoguide.store import load_dataset

    if not root:
        raise UsageError("no data root given (use --data or the config data.root)")
    root_path = Path(root)
    if not root_path.is_dir():
        raise UsageError(f"data root does not exist: {root_path}")
    return load_dataset(root_path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_phantom_gen(args) -> int:
    from echoguide.phantom import generate_dataset

    config = _load(args)
    phantom_cfg = config.phantom
    if args.seed is not None:
        phantom_cfg = replace(phantom_cfg, seed=args.seed)
    out = _resolve_out(args.out, "phantom")
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    written = generate_dataset(phantom_cfg, out)
    print(f"wrote {len(written)} scans to {out}")
    return 0


def cmd_pretrain(args) -> int:
    from echoguide.training import build_pretrain_model, run_pretraining

    config = _load(args)
    data_root = args.data or config.data.root
    split = _data_split(data_root)
    out = _resolve_out(args.out, "pretrain")
    model = build_pretrain_model(config.model, config.pretrain.seed)
    manifest = run_pretraining(
        model, split.train, config.pretrain, out, data_root=str(data_root)
    )
    last = manifest.read_metrics()[-1]
    print(f"pretrain done: epoch {last['epoch']} loss {last['loss_total']:.4f} -> {out}")
    return 0


def cmd_finetune(args) -> int:
    from echoguide.training import initialize_finetune_model, run_finetuning

    config = _load(args)
    finetune_cfg = config.finetune
    if args.protocol:
        finetune_cfg = replace(finetune_cfg, protocol=args.protocol)
    if args.seed is not None:
        finetune_cfg = replace(finetune_cfg, seed=args.seed)
    data_root = args.data or config.data.root
    split = _data_split(data_root)
    out = _resolve_out(args.out, "finetune")
    init_ckpt = None if args.init == "scratch" else args.init
    if init_ckpt is not None and not Path(init_ckpt).is_file():
        raise UsageError(f"checkpoint not found: {init_ckpt}")
    model = initialize_finetune_model(config.model, finetune_cfg, init_ckpt)
    manifest = run_finetuning(
        model,
        split.train,
        finetune_cfg,
        out,
        data_root=str(data_root),
        init_checkpoint=init_ckpt,
    )
    last = manifest.read_metrics()[-1]
    print(
        f"finetune[{finetune_cfg.protocol}] done: epoch {last['epoch']} "
        f"loss {last['loss']:.4f} -> {out}"
    )
    return 0


def _load_model_for_eval(args, config: ExperimentConfig):
    from echoguide.nets import load_checkpoint

    if not Path(args.ckpt).is_file():
        raise UsageError(f"checkpoint not found: {args.ckpt}")
    expected = config.model if getattr(args, "config", None) else None
    try:
        model, extra = load_checkpoint(args.ckpt, expected_config=expected)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return model, extra


def cmd_eval(args) -> int:
    from echoguide.evaluation import ModelPredictor, evaluate_guidance

    config = _load(args)
    model, extra = _load_model_for_eval(args, config)
    protocol = args.protocol or extra.get("protocol") or "bi"
    split = _data_split(args.data or config.data.root)
    out = _resolve_out(args.out, "eval")
    out.mkdir(parents=True, exist_ok=True)
    eval_cfg = config.eval.to_eval_config(protocol)
    report = evaluate_guidance(
        ModelPredictor(model), split.val, eval_cfg, model_id=Path(args.ckpt).name
    )
    report.to_csv(out / "report.csv")
    table = report.format_table()
    (out / "report.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_probe(args) -> int:
    from echoguide.evaluation import (
        SequenceFeatureExtractor,
        SingleFrameFeatureExtractor,
        identity_probe,
    )

    config = _load(args)
    model, extra = _load_model_for_eval(args, config)
    features = args.features or (
        "single_frame" if extra.get("protocol") == "single_frame" else "sequence"
    )
    if features == "sequence":
        extractor = SequenceFeatureExtractor(model, seq_len=config.eval.seq_len)
    else:
        extractor = SingleFrameFeatureExtractor(model)
    split = _data_split(args.data or config.data.root)
    out = _resolve_out(args.out, "probe")
    out.mkdir(parents=True, exist_ok=True)
    report = identity_probe(
        extractor,
        split.val,
        n_pairs=args.pairs or config.eval.probe_pairs,
        seed=config.eval.seed,
        steps=config.eval.probe_steps,
    )
    payload = {
        "accuracy": report.accuracy,
        "n_train_pairs": report.n_train_pairs,
        "n_test_pairs": report.n_test_pairs,
        "features": features,
        "curve": report.curve,
    }
    (out / "probe.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(f"identity probe accuracy: {report.accuracy:.3f} ({features} features)")
    return 0


def cmd_phase(args) -> int:
    from echoguide import phantom
    from echoguide.evaluation import (
        phase_robustness,
        sequence_phase_predict_fn,
        single_frame_phase_predict_fn,
    )

    config = _load(args)
    model, extra = _load_model_for_eval(args, config)
    data_root = args.data or config.data.root
    split = _data_split(data_root)
    seeds = phantom.load_subject_seeds(data_root)
    features = args.features or (
        "single_frame" if extra.get("protocol") == "single_frame" else "sequence"
    )
    if features == "sequence":
        predict_fn = sequence_phase_predict_fn(model, seq_len=config.eval.seq_len)
    else:
        predict_fn = single_frame_phase_predict_fn(model)
    out = _resolve_out(args.out, "phase")
    out.mkdir(parents=True, exist_ok=True)
    report = phase_robustness(
        predict_fn,
        split.val,
        lambda sid: phantom.sample_subject(seeds[sid]),
        n_pairs=args.pairs or config.eval.phase_pairs,
        min_phase_gap=config.eval.phase_gap,
        seed=config.eval.seed,
        image_size=config.phantom.image_size,
    )
    payload = {
        "mean_abs_diff": report.mean_abs_diff,
        "per_component": report.per_component,
        "n_pairs": report.n_pairs,
        "features": features,
    }
    (out / "phase.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(f"phase sensitivity (mean abs diff): {report.mean_abs_diff:.4f}")
    return 0


def cmd_bench(args) -> int:
    from echoguide.evaluation import latency_bench
    from echoguide.training import build_pretrain_model

    config = _load(args)
    if args.ckpt:
        model, _ = _load_model_for_eval(args, config)
    else:
        model = build_pretrain_model(config.model, seed=0)
    report = latency_bench(model, seq_len=config.eval.seq_len, n_iters=config.eval.bench_iters)
    print(
        f"latency: {report.mean_ms:.2f} +/- {report.std_ms:.2f} ms per inference "
        f"(L={report.seq_len}, n={report.n_iters})"
    )
    print(f"hardware: {report.hardware}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(json.dumps(asdict(report), indent=2) + "\n")
    return 0


def cmd_visualize(args) -> int:
    from echoguide.evaluation import ModelPredictor, retrieval_visualization

    config = _load(args)
    model, extra = _load_model_for_eval(args, config)
    protocol = args.protocol or extra.get("protocol") or "bi"
    split = _data_split(args.data or config.data.root)
    scans = {t.scan_name: t for t in split.train + split.val}
    if args.scan not in scans:
        raise UsageError(f"scan {args.scan!r} not found; have {sorted(scans)[:5]}...")
    traj = scans[args.scan]
    out = _resolve_out(args.out, "visualize")
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"retrieval_{args.scan}_a{args.anchor}_g{args.plane}.png"
    result = retrieval_visualization(
        ModelPredictor(model),
        traj,
        args.anchor,
        args.plane,
        config.eval.to_eval_config(protocol),
        path,
    )
    print(json.dumps(result, indent=2))
    return 0


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------


def parse_ablate_values(axis: str, text: str) -> list:
    """Parse `3..8`, comma lists, and `lo:hi` ratio pairs."""
    values: list = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        if ".." in token:
            lo, hi = token.split("..", 1)
            values.extend(range(int(lo), int(hi) + 1))
        elif axis == "mask_ratio":
            lo, hi = token.split(":", 1)
            values.append((float(lo), float(hi)))
        elif axis in ("strategy", "mask_type"):
            values.append(token)
        elif axis == "arch_mlp":
            values.append(float(token))
        else:
            values.append(int(token))
    if not values:
        raise UsageError(f"no values parsed from {text!r}")
    return values


def apply_axis(config: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "seq_len":
        return ExperimentConfig(
            data=config.data,
            phantom=config.phantom,
            model=config.model,
            pretrain=replace(config.pretrain, seq_len=value),
            finetune=replace(config.finetune, seq_len=value),
            eval=replace(config.eval, seq_len=value),
            ablate=config.ablate,
        )
    if axis == "strategy":
        return ExperimentConfig(
            data=config.data,
            phantom=config.phantom,
            model=config.model,
            pretrain=replace(config.pretrain, strategy=value),
            finetune=replace(config.finetune, strategy=value),
            eval=replace(config.eval, strategy=value),
            ablate=config.ablate,
        )
    if axis == "mask_type":
        return replace_section(config, pretrain=replace(config.pretrain, mask_type=value))
    if axis == "mask_ratio":
        lo, hi = value
        return replace_section(
            config, pretrain=replace(config.pretrain, mask_ratio_lo=lo, mask_ratio_hi=hi)
        )
    if axis == "arch_depth":
        return replace_section(config, model=replace(config.model, seq_depth=value))
    if axis == "arch_width":
        return replace_section(config, model=replace(config.model, seq_width=value))
    if axis == "arch_heads":
        return replace_section(config, model=replace(config.model, seq_heads=value))
    if axis == "arch_mlp":
        return replace_section(config, model=replace(config.model, seq_mlp_ratio=value))
    raise UsageError(f"unknown ablation axis {axis!r}")


def replace_section(config: ExperimentConfig, **sections) -> ExperimentConfig:
    kwargs = {
        "data": config.data,
        "phantom": config.phantom,
        "model": config.model,
        "pretrain": config.pretrain,
        "finetune": config.finetune,
        "eval": config.eval,
        "ablate": config.ablate,
    }
    kwargs.update(sections)
    return ExperimentConfig(**kwargs)


def run_ablate_job(config: ExperimentConfig, data_root: str, out_dir: Path, label: str) -> dict:
    from echoguide.evaluation import ModelPredictor, evaluate_guidance
    from echoguide.training import (
        build_pretrain_model,
        initialize_finetune_model,
        run_finetuning,
        run_pretraining,
    )

    split = _data_split(data_root)
    pre_dir = out_dir / "pretrain"
    model = build_pretrain_model(config.model, config.pretrain.seed)
    pre_manifest = run_pretraining(
        model, split.train, config.pretrain, pre_dir, data_root=data_root
    )
    ckpt = pre_manifest.latest_checkpoint()

    ft_dir = out_dir / "finetune"
    ft_model = initialize_finetune_model(config.model, config.finetune, ckpt)
    ft_manifest = run_finetuning(
        ft_model, split.train, config.finetune, ft_dir,
        data_root=data_root, init_checkpoint=str(ckpt),
    )
    protocol = {"single_frame": "single_frame", "uni": "uni", "bi": "bi"}[config.finetune.protocol]
    report = evaluate_guidance(
        ModelPredictor(ft_model), split.val, config.eval.to_eval_config(protocol),
        model_id=label,
    )
    report.to_csv(out_dir / "report.csv")
    return {
        "label": label,
        "trans_mae": report.trans_avg,
        "rot_mae": report.rot_avg,
        "finetune_loss": ft_manifest.read_metrics()[-1]["loss"],
    }


def _ablate_worker(payload):
    from echoguide.config import config_from_dict

    raw_config, data_root, out_dir, label = payload
    return run_ablate_job(config_from_dict(raw_config), data_root, Path(out_dir), label)


def cmd_ablate(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    config = _load(args)
    if args.axis not in ABLATE_AXES:
        raise UsageError(f"--axis must be one of {ABLATE_AXES}, got {args.axis!r}")
    values = parse_ablate_values(args.axis, args.values)
    data_root = args.data or config.data.root
    _data_split(data_root)  # fail fast on a bad root
    out = _resolve_out(args.out, "ablate")
    out.mkdir(parents=True, exist_ok=True)

    jobs = []
    for value in values:
        label = str(value).replace(" ", "")
        job_config = apply_axis(config, args.axis, value)
        jobs.append((job_config.to_dict(), str(data_root), str(out / f"{args.axis}_{label}"), label))

    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_ablate_worker, jobs))
    else:
        results = [_ablate_worker(job) for job in jobs]

    csv_lines = [f"{args.axis},trans_mae,rot_mae,finetune_loss"]
    for res in results:
        csv_lines.append(
            f"{res['label']},{res['trans_mae']:.6f},{res['rot_mae']:.6f},"
            f"{res['finetune_loss']:.6f}"
        )
    (out / "summary.csv").write_text("\n".join(csv_lines) + "\n")

    labels = [res["label"] for res in results]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(labels, [r["trans_mae"] for r in results], marker="o", label="trans (mm)")
    ax1.plot(labels, [r["rot_mae"] for r in results], marker="s", label="rot (deg)")
    ax1.set_xlabel(args.axis)
    ax1.set_ylabel("MAE")
    ax1.legend()
    fig.tight_layout()
    fig.savefig(out / f"{args.axis}.png", dpi=120)
    plt.close(fig)
    print((out / "summary.csv").read_text())
    return 0


def cmd_config_dump(args) -> int:
    config = _load(args)
    print(config.dumps())
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="echoguide",
        description="Sequence-aware guidance-model training on phantom-heart scans",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, data=False, out=True, overrides=True):
        if config:
            p.add_argument("--config", help="JSON experiment config")
        if data:
            p.add_argument("--data", help="dataset root directory")
        if out:
            p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
        if overrides:
            p.add_argument(
                "--set", action="append", metavar="SECTION.KEY=VALUE",
                help="config override, repeatable",
            )

    p = sub.add_parser("phantom-gen", help="generate the synthetic phantom dataset")
    common(p)
    p.add_argument("--seed", type=int, help="master seed (overrides config)")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output dir")
    p.set_defaults(fn=cmd_phantom_gen)

    p = sub.add_parser("pretrain", help="masked sequence-aware pre-training")
    common(p, data=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="guidance fine-tuning")
    common(p, data=True)
    p.add_argument("--init", required=True, help="'scratch' or a pre-training checkpoint path")
    p.add_argument("--protocol", choices=("single_frame", "uni", "bi"))
    p.add_argument("--seed", type=int, help="fine-tune seed (overrides config)")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="per-plane guidance MAE on the validation split")
    common(p, data=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--protocol", choices=("single_frame", "uni", "bi"))
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("probe", help="same-subject identity probe on frozen features")
    common(p, data=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--features", choices=("sequence", "single_frame"))
    p.add_argument("--pairs", type=int)
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("phase", help="prediction sensitivity to cardiac phase")
    common(p, data=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--features", choices=("sequence", "single_frame"))
    p.add_argument("--pairs", type=int)
    p.set_defaults(fn=cmd_phase)

    p = sub.add_parser("bench", help="single-sequence inference latency")
    common(p, out=False)
    p.add_argument("--ckpt")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("visualize", help="nearest-neighbor retrieval grid image")
    common(p, data=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scan", required=True, help="scan directory name")
    p.add_argument("--anchor", type=int, required=True)
    p.add_argument("--plane", type=int, required=True, choices=range(1, 11))
    p.add_argument("--protocol", choices=("single_frame", "uni", "bi"))
    p.set_defaults(fn=cmd_visualize)

    p = sub.add_parser("ablate", help="train+eval sweeps over one hyperparameter axis")
    common(p, data=True)
    p.add_argument("--axis", required=True, choices=ABLATE_AXES)
    p.add_argument("--values", required=True, help="e.g. 3..8 or dense,random,segmental")
    p.add_argument("--jobs", type=int, default=1, help="parallel jobs (default sequential)")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("config-dump", help="print the merged config with defaults")
    common(p, out=False)
    p.set_defaults(fn=cmd_config_dump)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
