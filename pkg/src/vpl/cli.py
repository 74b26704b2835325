"""Command-line surface binding the lab into experiment recipes.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error. Every
command is deterministic under a fixed seed; the environment variable
VPL_THREADS caps how many sweep cells run in parallel.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import adaptation as A
from . import datahub as D
from . import gmoe as G
from . import reports as R
from . import trainlab as L
from .backbone import Backbone, BackboneConfig, ConfigError as BackboneConfigError
from .checkpoint import CheckpointError, file_sha256, load_backbone, read_container, save_backbone
from .config import ConfigError, DataSpec, load_config, load_dataspec
from .gradcheck import grad_check
from .tensor import DimensionError

DEFAULT_BUDGETS = (1.01, 1.02, 1.05, 1.10, 1.17, 1.39)

_USAGE_ERRORS = (
    ConfigError,
    A.PlanError,
    D.ManifestError,
    D.SplitError,
    CheckpointError,
    BackboneConfigError,
)


class CliRuntimeError(RuntimeError):
    pass


# -- shared helpers ---------------------------------------------------------------


def _threads():
    try:
        return max(1, int(os.environ.get("VPL_THREADS", "1")))
    except ValueError:
        return 1


def _run_cells(fn, cells):
    """Run cells (deterministically ordered) with up to VPL_THREADS workers."""
    n = _threads()
    if n <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, cells))


def _ensure_outdir(args, cfg):
    out = getattr(args, "out_dir", None) or cfg.out_dir or "."
    os.makedirs(out, exist_ok=True)
    return out


def _dataset(cfg_data):
    """(manifest, loader) for a config data section."""
    if cfg_data.synthetic is not None:
        manifest, gen = D.synth_dataset(cfg_data.synthetic, num_samples=cfg_data.num_samples)
        return manifest, gen
    manifest = D.load_manifest(cfg_data.manifest, num_classes=cfg_data.num_classes)
    return manifest, None


def _arrays(manifest, generator, image_shape, refs=None, name="data"):
    X, y = D.materialize(manifest, generator, expected_shape=image_shape, refs=refs)
    return L.ArrayData(X, y, name=name)


def _default_split(manifest, cfg):
    base = cfg.split
    if base is not None:
        return base
    seed = cfg.train.seed
    return D.SplitSpec(
        seen_patients=len(manifest.patients()), unseen_patients=0, seed=seed
    )


def _split_arrays(manifest, generator, image_shape, spec):
    split = D.patient_split(manifest, spec)
    parts = {}
    for part in ("train", "test_seen", "test_unseen"):
        refs = split.part(part)
        if refs:
            parts[part] = _arrays(manifest, generator, image_shape, refs=refs, name=part)
    return split, parts


def _image_shape(backbone_config):
    return (backbone_config.in_channels, backbone_config.image_size, backbone_config.image_size)


def _load_model(path):
    header, _ = read_container(path)
    if header.get("kind") == "backbone":
        return load_backbone(path)
    return A.load_adapted(path)


# -- budget -> plan search ----------------------------------------------------------


def budget_plan(budget, config, num_classes):
    """Deterministic greedy realization of a Total-Params budget: prompt
    length first (vpt-deep), then bottleneck r (adapter); the plain linear
    head is the floor. Prompt counts are capped at the patch count so
    prompts never outnumber the image tokens they steer; budgets beyond
    that cap fall to the bottleneck knob. Returns (plan, achieved)."""
    ref = L.encoder_param_count(config)
    candidates = []

    def achieved_of(plan):
        return L.total_params_multiplier(
            L.PlanAccounting.from_plan(plan, config, num_classes), ref
        )

    def consider(kind, order, plan):
        candidates.append((abs(achieved_of(plan) - budget), kind, order, plan))

    consider(2, 0, A.make_plan("linear"))
    for p in range(1, max(config.num_patches, 1) + 1):
        plan = A.make_plan("vpt-deep", {"prompt_len": p})
        consider(0, p, plan)
        if achieved_of(plan) > budget:
            break
    for r in range(1, 4097):
        plan = A.make_plan("adapter", {"bottleneck": r})
        consider(1, r, plan)
        if achieved_of(plan) > budget:
            break
    candidates.sort(key=lambda c: (c[0], c[1], c[2]))
    _, _, _, plan = candidates[0]
    return plan, achieved_of(plan)


def _describe_plan(plan):
    if plan.method == "vpt-deep":
        return f"vpt-deep(P={plan.hyper['prompt_len']})"
    if plan.method == "adapter":
        return f"adapter(r={plan.hyper['bottleneck']})"
    return plan.method


# -- commands -----------------------------------------------------------------------


def cmd_pretrain(args):
    cfg = load_config(args.config)
    if cfg.data.synthetic is None:
        raise ConfigError("pretrain needs a synthetic data section")
    domain = replace(cfg.data.synthetic, domain_tag=args.domain)
    train_cfg = cfg.train if args.seed is None else replace(cfg.train, seed=args.seed)
    if cfg.backbone.num_classes != domain.num_classes:
        raise ConfigError(
            f"backbone num_classes {cfg.backbone.num_classes} != domain classes {domain.num_classes}"
        )
    bb, result = L.pretrain_expert(
        domain, cfg.backbone, train_cfg, num_samples=cfg.data.num_samples
    )
    save_backbone(bb, args.out)
    print(f"pretrained domain={args.domain} val_accuracy={result.accuracy:.4f}")
    print(f"checkpoint {args.out} sha256={file_sha256(args.out)}")
    return 0


def cmd_adapt(args):
    cfg = load_config(args.config)
    plan = A.make_plan(args.method, cfg.plan.hyper if cfg.plan.method == args.method else None)
    backbones = [load_backbone(args.backbone)]
    if plan.method in A.DUAL_BACKBONE_METHODS:
        if not args.backbone2:
            raise ConfigError(f"{plan.method} needs --backbone2 (a second expert checkpoint)")
        backbones.append(load_backbone(args.backbone2))
    elif args.backbone2:
        raise ConfigError(f"{plan.method} takes a single backbone; drop --backbone2")

    manifest, gen = _dataset(cfg.data)
    split, parts = _split_arrays(manifest, gen, _image_shape(cfg.backbone), _default_split(manifest, cfg))
    if "train" not in parts:
        raise CliRuntimeError("split produced an empty training set")
    train_cfg = cfg.train if args.seed is None else replace(cfg.train, seed=args.seed)

    model = A.build_plan(plan, backbones if len(backbones) > 1 else backbones[0],
                         num_classes=manifest.num_classes, seed=train_cfg.seed)
    history = L.train(model, parts["train"], train_cfg,
                      eval_data=parts.get("test_seen"))
    if len(backbones) == 1:
        paths = {"main": args.backbone}
    else:
        by_tag = {bb.domain_tag: p for bb, p in zip(backbones, (args.backbone, args.backbone2))}
        if set(by_tag) == {"general", "medical"}:
            paths = by_tag
        else:
            paths = {"general": args.backbone, "medical": args.backbone2}
    A.save_adapted(model, args.out, paths)
    history.write_csv(args.out + ".history.csv")
    result = L.evaluate(model, parts.get("test_seen", parts["train"]))
    print(f"adapted method={plan.method} final_loss={history.final_loss()} "
          f"accuracy={result.accuracy:.4f}")
    if plan.method == "gmoe-adapter":
        rows = G.gate_summary(model.gates())
        R.write_results_csv(rows, args.out + ".gate_summary.csv",
                            columns=("gate", "parameterization", "mean", "min", "max"))
        for row in rows:
            print(f"gate {row['gate']}: mean={row['mean']:.4f} "
                  f"min={row['min']:.4f} max={row['max']:.4f}")
    print(f"checkpoint {args.out} sha256={file_sha256(args.out)}")
    return 0


def cmd_eval(args):
    model = _load_model(args.model)
    config = model.config
    if str(args.data).endswith(".json"):
        dataspec = load_dataspec(args.data)
    else:
        dataspec = DataSpec(manifest=args.data)
    manifest, gen = _dataset(dataspec)

    base_spec = None
    if args.config:
        base_spec = load_config(args.config).split
    if base_spec is None:
        base_spec = D.SplitSpec(seen_patients=len(manifest.patients()), unseen_patients=0,
                                seed=args.seed)

    rows = []
    for k in range(args.seeds):
        spec = replace(base_spec, seed=base_spec.seed + k)
        split, parts = _split_arrays(manifest, gen, _image_shape(config), spec)
        if args.split not in parts:
            raise CliRuntimeError(f"split {args.split!r} is empty under spec {spec}")
        result = L.evaluate(model, parts[args.split], split_name=args.split)
        rows.append(result)
        auc = "" if result.auroc is None else f"{result.auroc:.6f}"
        print(f"seed={spec.seed} split={args.split} n={result.n} "
              f"accuracy={result.accuracy:.6f} auroc={auc} loss={result.loss:.6f}")
    mean_acc = float(np.mean([r.accuracy for r in rows]))
    aurocs = [r.auroc for r in rows if r.auroc is not None]
    mean_auc = f"{float(np.mean(aurocs)):.6f}" if aurocs else ""
    print(f"mean over {args.seeds} seed(s): accuracy={mean_acc:.6f} auroc={mean_auc}")
    return 0


def _train_eval_cell(backbones, plan, seed, train_cfg, parts, num_classes):
    model = A.build_plan(plan, backbones, num_classes=num_classes, seed=seed)
    L.train(model, parts["train"], replace(train_cfg, seed=seed))
    out = {}
    for part_name in ("test_seen", "test_unseen"):
        if part_name in parts:
            out[part_name] = L.evaluate(model, parts[part_name], split_name=part_name)
    return out


def cmd_sweep_scaling(args):
    cfg = load_config(args.config)
    budgets = sorted(args.budgets)
    out_dir = _ensure_outdir(args, cfg)
    shape = _image_shape(cfg.backbone)

    if args.backbone:
        bb = load_backbone(args.backbone)
    else:
        # no checkpoint given: pretrain a fresh expert on a shifted-seed copy
        # of the task domain so the sweep still adapts transferred features
        if cfg.data.synthetic is None:
            raise ConfigError("sweep-scaling without --backbone needs synthetic data")
        pre_domain = replace(cfg.data.synthetic, seed=cfg.data.synthetic.seed + 7919)
        bb, _ = L.pretrain_expert(pre_domain, cfg.backbone, cfg.train,
                                  num_samples=cfg.data.num_samples)

    manifest, gen = _dataset(cfg.data)
    split, parts = _split_arrays(manifest, gen, shape, _default_split(manifest, cfg))
    if "train" not in parts or "test_seen" not in parts:
        raise CliRuntimeError("scaling sweep needs non-empty train and test_seen parts")
    seeds = [cfg.train.seed + i for i in range(args.seeds)]

    plans = [budget_plan(b, bb.config, manifest.num_classes) for b in budgets]

    def run(cell):
        budget_idx, seed = cell
        plan, _ = plans[budget_idx]
        return _train_eval_cell(bb, plan, seed, cfg.train, parts, manifest.num_classes)

    cells = [(i, s) for i in range(len(budgets)) for s in seeds]
    outcomes = _run_cells(run, cells)

    result_rows = []
    table_rows = []
    mean_accs = []
    for i, budget in enumerate(budgets):
        per_seed = [outcomes[j] for j, cell in enumerate(cells) if cell[0] == i]
        accs = [o["test_seen"].accuracy for o in per_seed]
        aurocs = [o["test_seen"].auroc for o in per_seed if o["test_seen"].auroc is not None]
        plan, achieved = plans[i]
        mean_accs.append(float(np.mean(accs)))
        table_rows.append([f"{budget:.2f}X", f"{achieved:.4f}X", _describe_plan(plan),
                           float(np.mean(accs)),
                           float(np.mean(aurocs)) if aurocs else ""])
        for seed, acc in zip(seeds, accs):
            result_rows.append({
                "method": _describe_plan(plan),
                "total_params_multiplier": achieved,
                "dataset": manifest.name,
                "split": "test_seen",
                "accuracy": acc,
                "auroc": per_seed[seeds.index(seed)]["test_seen"].auroc,
                "seed": seed,
            })

    table = R.format_table(
        ["budget", "achieved", "plan", f"{manifest.name} acc", "auroc"], table_rows
    )
    print(table, end="")
    trend_lines = []
    if len(budgets) > 1:
        slack = args.slack
        ok = all(b >= a - slack for a, b in zip(mean_accs, mean_accs[1:]))
        for (b0, a0), (b1, a1) in zip(zip(budgets, mean_accs), zip(budgets[1:], mean_accs[1:])):
            trend_lines.append(f"{b0:.2f}X -> {b1:.2f}X: delta={a1 - a0:+.4f}")
        trend_lines.append(
            f"monotone nondecreasing within slack {slack}: {'PASS' if ok else 'FAIL'}"
        )
        print("\n".join(trend_lines))
    R.write_results_csv(result_rows, os.path.join(out_dir, "results_scaling.csv"))
    R.write_text(os.path.join(out_dir, "table_scaling.md"),
                 table + ("\n".join(trend_lines) + "\n" if trend_lines else ""))
    return 0


def _ood_columns(mode, specs):
    cols = []
    for spec in specs:
        if mode == 1:
            cols.append((f"{spec.seen_patients} Seen", spec, "test_seen"))
            if spec.unseen_patients:
                cols.append((f"{spec.unseen_patients} Unseen", spec, "test_unseen"))
        elif mode == 2:
            if spec is specs[0]:
                cols.append((f"{spec.seen_patients} Seen", spec, "test_seen"))
            cols.append((f"{spec.unseen_patients} Unseen", spec, "test_unseen"))
        else:
            cols.append((f"{spec.seen_patients} Seen", spec, "test_unseen"))
    return cols


def cmd_ood(args):
    cfg = load_config(args.config)
    out_dir = _ensure_outdir(args, cfg)
    shape = _image_shape(cfg.backbone)
    manifest, gen = _dataset(cfg.data)

    seed = cfg.split.seed if cfg.split is not None else cfg.train.seed
    fraction = (cfg.split.train_fraction_within_seen if cfg.split is not None else 0.8)
    specs = D.ood_sweep_specs(args.mode, seed=seed, train_fraction=fraction)

    audits = []
    splits = {}
    for spec in specs:
        split = D.patient_split(manifest, spec)
        audit = split.audit(manifest)
        splits[spec] = split
        name = f"split_mode{args.mode}_seen{spec.seen_patients}_unseen{spec.unseen_patients}.json"
        with open(os.path.join(out_dir, name), "w") as f:
            f.write(split.to_json())
        audits.append(
            f"seen={spec.seen_patients} unseen={spec.unseen_patients} "
            f"leakage_free={audit['leakage_free']} covered={audit['covered']}"
        )
    print(f"mode {args.mode} split settings: "
          + ", ".join(f"({s.seen_patients},{s.unseen_patients})" for s in specs))
    audit_block = "leakage audit:\n" + "\n".join("  " + a for a in audits)
    print(audit_block)
    if any("leakage_free=False" in a for a in audits):
        raise CliRuntimeError("leakage audit failed")
    if args.splits_only:
        R.write_text(os.path.join(out_dir, f"table_ood_mode{args.mode}.md"), audit_block + "\n")
        return 0

    budgets = sorted(args.budgets)
    columns = _ood_columns(args.mode, specs)
    if args.backbone:
        bb = load_backbone(args.backbone)
    else:
        if cfg.data.synthetic is None:
            raise ConfigError("ood training without --backbone needs synthetic data")
        pre_domain = replace(cfg.data.synthetic, seed=cfg.data.synthetic.seed + 7919)
        bb, _ = L.pretrain_expert(pre_domain, cfg.backbone, cfg.train,
                                  num_samples=cfg.data.num_samples)
    plans = [budget_plan(b, bb.config, manifest.num_classes) for b in budgets]

    spec_parts = {}
    for spec in specs:
        _, parts = _split_arrays(manifest, gen, shape, spec)
        spec_parts[spec] = parts

    def run(cell):
        budget_idx, spec = cell
        plan, _ = plans[budget_idx]
        return _train_eval_cell(bb, plan, cfg.train.seed, cfg.train,
                                spec_parts[spec], manifest.num_classes)

    cells = [(i, spec) for i in range(len(budgets)) for spec in specs]
    outcomes = dict(zip(cells, _run_cells(run, cells)))

    table_rows = []
    result_rows = []
    for i, budget in enumerate(budgets):
        plan, achieved = plans[i]
        row = [f"{budget:.2f}X"]
        for label, spec, part in columns:
            outcome = outcomes[(i, spec)]
            if part not in outcome:
                row.append("")
                continue
            row.append(outcome[part].accuracy)
            result_rows.append({
                "method": _describe_plan(plan),
                "total_params_multiplier": achieved,
                "dataset": manifest.name,
                "split": f"{part}[{spec.seen_patients}/{spec.unseen_patients}]",
                "accuracy": outcome[part].accuracy,
                "auroc": outcome[part].auroc,
                "seed": cfg.train.seed,
            })
        table_rows.append(row)

    table = R.format_table(["Total Params"] + [c[0] for c in columns], table_rows)
    print(table, end="")
    R.write_text(os.path.join(out_dir, f"table_ood_mode{args.mode}.md"),
                 table + "\n" + audit_block + "\n")
    R.write_results_csv(result_rows, os.path.join(out_dir, f"results_ood_mode{args.mode}.csv"))
    return 0


def cmd_params(args):
    cfg = load_config(args.config)
    num_classes = cfg.data.task_num_classes() or cfg.backbone.num_classes
    ref = L.encoder_param_count(cfg.backbone)
    methods = list(A.METHODS) if args.method == "all" else [args.method]
    rows = []
    for method in methods:
        hyper = cfg.plan.hyper if cfg.plan.method == method else None
        plan = A.make_plan(method, hyper)
        count = A.plan_trainable_count(plan, cfg.backbone, num_classes)
        mult = L.total_params_multiplier(
            L.PlanAccounting.from_plan(plan, cfg.backbone, num_classes), ref, tasks=args.tasks
        )
        rows.append((method, count, mult))
    rows.sort(key=lambda r: (r[2], r[0]))
    print(f"backbone_ref={ref} tasks={args.tasks} num_classes={num_classes}")
    table = R.format_table(
        ["method", "per-task trainable", "total-params multiplier"],
        [[m, c, f"{mult:.4f}X"] for m, c, mult in rows],
    )
    print(table, end="")
    return 0


def cmd_gradcheck(args):
    if args.config:
        cfg = load_config(args.config)
        config = cfg.backbone
        hyper = cfg.plan.hyper if cfg.plan.method == args.method else None
    else:
        config = BackboneConfig(image_size=8, patch_size=4, in_channels=1, dim=16,
                                depth=2, heads=2, num_classes=3)
        hyper = {
            "adapter": {"bottleneck": 4},
            "moe-adapter": {"bottleneck": 4},
            "gmoe-adapter": {"bottleneck": 4},
            "vpt-shallow": {"prompt_len": 4},
            "vpt-deep": {"prompt_len": 2},
            "sidetune": {"side_width": 8},
        }.get(args.method)
    plan = A.make_plan(args.method, hyper)
    rng = np.random.default_rng(args.seed)
    if plan.method in A.DUAL_BACKBONE_METHODS:
        backbones = [
            Backbone.init(config, seed=args.seed + i, domain_tag=tag)
            for i, tag in enumerate(("general", "medical"))
        ]
        model = A.build_plan(plan, backbones, seed=args.seed)
    else:
        model = A.build_plan(plan, Backbone.init(config, seed=args.seed), seed=args.seed)
    # shake trainable params so zero-initialized branches carry gradient
    for p in model.trainable_parameters():
        p.value.data += rng.normal(0.0, 0.05, size=p.value.shape)
    batch = rng.normal(size=(2, config.in_channels, config.image_size, config.image_size))
    labels = rng.integers(0, model.num_classes, size=2)

    def loss_fn(m, x):
        return L.cross_entropy(m.forward(x), labels)

    report = grad_check(model, loss_fn, batch, step=args.step, tol=args.tol)
    print(report.summary())
    if not report.passed:
        print(f"FAILED parameters: {', '.join(report.failures)}", file=sys.stderr)
        return 1
    print(f"gradcheck {args.method}: PASS ({len(report.checks)} parameters)")
    return 0


# -- parser -------------------------------------------------------------------------


def _positive_int(value):
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return n


def _budget_list(value):
    try:
        budgets = [float(tok) for tok in value.split(",") if tok]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad budget list {value!r}")
    if not budgets:
        raise argparse.ArgumentTypeError("budget list is empty")
    return budgets


def build_parser():
    parser = argparse.ArgumentParser(prog="vpl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a domain-tagged expert on a synthetic domain")
    p.add_argument("--domain", required=True, choices=["general", "medical"])
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="build an adaptation plan, train it, write a checkpoint")
    p.add_argument("--method", required=True, choices=list(A.METHODS))
    p.add_argument("--backbone", required=True)
    p.add_argument("--backbone2", default=None)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest/data spec split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="manifest CSV or data-spec JSON")
    p.add_argument("--split", default="test_seen", choices=["train", "test_seen", "test_unseen"])
    p.add_argument("--seeds", type=_positive_int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="config supplying the split spec")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-scaling", help="budget sweep mirroring the scaling-law table")
    p.add_argument("--budgets", type=_budget_list, default=list(DEFAULT_BUDGETS))
    p.add_argument("--config", required=True)
    p.add_argument("--backbone", default=None)
    p.add_argument("--seeds", type=_positive_int, default=1)
    p.add_argument("--slack", type=float, default=0.01)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_sweep_scaling)

    p = sub.add_parser("ood", help="patient-ID out-of-distribution protocols 1|2|3")
    p.add_argument("--mode", type=int, required=True, choices=[1, 2, 3])
    p.add_argument("--config", required=True)
    p.add_argument("--backbone", default=None)
    p.add_argument("--budgets", type=_budget_list, default=list(DEFAULT_BUDGETS))
    p.add_argument("--splits-only", action="store_true")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_ood)

    p = sub.add_parser("params", help="trainable counts and Total-Params multipliers")
    p.add_argument("--method", required=True, choices=list(A.METHODS) + ["all"])
    p.add_argument("--config", required=True)
    p.add_argument("--tasks", type=_positive_int, required=True)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference check of one method's gradients")
    p.add_argument("--method", required=True, choices=list(A.METHODS))
    p.add_argument("--config", default=None)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (CliRuntimeError, L.TrainingDiverged, DimensionError, ValueError, OSError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
