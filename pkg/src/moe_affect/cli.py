"""moe-affect: command-line pipeline.

    synth -> train -> predict -> vote -> rerank -> eval / report-dist
    pseudo-label feeds train --pretrain; gradcheck verifies the gradient rules.

Exit codes: 0 success, 1 validation error, 2 I/O error.
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .checks import run_suite
from .data import (DataFormatError, ReliabilityTable, read_bundle, read_labels, read_predictions,
                   read_reliabilities, read_vlm_records, tree_sha256, write_bundle, write_jsonl, write_labels,
                   write_predictions, write_reliabilities, write_vlm_records)
from .ensemble import (RerankRuleSet, format_distribution_table, read_vote_mass, reliability_table, rerank,
                       weighted_vote, write_vote_mass)
from .metrics import evaluate
from .model import ConfigError, MoeConfig, MoeModel
from .pseudo import agreement_report, consensus_filter, export_pseudo_bundle, write_pseudo_set
from .synth import SynthConfig, SynthConfigError, gen_bundle, gen_noisy_predictions, gen_vlm_records
from .taxonomy import EMOTIONS, UnknownLabelError, label_to_index
from .training import TrainConfig, cross_validate, fold_ensemble_predict, train_supervised, two_stage_train

log = logging.getLogger("moe_affect")

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2
THREADS_ENV = "MOE_AFFECT_THREADS"


class UsageError(Exception):
    pass


def default_run_config():
    train = TrainConfig().to_dict()
    train.pop("seed")
    synth = SynthConfig().to_dict()
    synth.pop("seed")
    return {
        "seed": 42,
        "train": train,
        "model": {"d_model": 32, "n_heads": 4, "fused_head": "concat_linear", "rank": 4,
                  "fusion_hidden": 0, "positional_encoding": False},
        "synth": synth,
        "rerank": {"tau": 0.25, "vote_mode": "mass"},
    }


# flag dest -> (section, key)
OVERRIDES = {
    "lr0": ("train", "lr0"), "lr_end": ("train", "lr_end"), "weight_decay": ("train", "weight_decay"),
    "beta1": ("train", "beta1"), "beta2": ("train", "beta2"), "adam_eps": ("train", "adam_eps"),
    "batch_size": ("train", "batch_size"), "epochs": ("train", "epochs"), "loss": ("train", "loss"),
    "focal_gamma": ("train", "focal_gamma"), "class_weights": ("train", "class_weights"),
    "d_model": ("model", "d_model"), "n_heads": ("model", "n_heads"), "fused_head": ("model", "fused_head"),
    "rank": ("model", "rank"), "fusion_hidden": ("model", "fusion_hidden"),
    "positional_encoding": ("model", "positional_encoding"),
    "n": ("synth", "n"), "tau": ("rerank", "tau"), "vote_mode": ("rerank", "vote_mode"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_train_flags(p):
    g = p.add_argument_group("training (override the config file)")
    g.add_argument("--lr0", type=float, help="initial learning rate (default 1e-3)")
    g.add_argument("--lr-end", dest="lr_end", type=float, help="final learning rate (default 1e-4)")
    g.add_argument("--weight-decay", dest="weight_decay", type=float)
    g.add_argument("--beta1", type=float)
    g.add_argument("--beta2", type=float)
    g.add_argument("--adam-eps", dest="adam_eps", type=float)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--loss", choices=("ce", "focal"))
    g.add_argument("--focal-gamma", dest="focal_gamma", type=float)
    g.add_argument("--class-weights", dest="class_weights", type=lambda s: [float(v) for v in s.split(",")],
                   help="six comma-separated per-class loss weights")
    g = p.add_argument_group("model")
    g.add_argument("--d-model", dest="d_model", type=int)
    g.add_argument("--n-heads", dest="n_heads", type=int)
    g.add_argument("--fused-head", dest="fused_head", choices=("concat_linear", "low_rank_fusion"))
    g.add_argument("--rank", type=int)
    g.add_argument("--fusion-hidden", dest="fusion_hidden", type=int)
    g.add_argument("--positional-encoding", dest="positional_encoding", action="store_const", const=True)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--workdir", default=".", help="base directory for all relative paths")
    common.add_argument("--config", help="JSON run-config file")
    common.add_argument("--seed", type=int, help="random seed (default 42)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="moe-affect", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic bundle, truth and simulated predictors")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="number of samples")

    p = sub.add_parser("train", parents=[common], help="train one model or a k-fold ensemble")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=1, help="k >= 2 runs k-fold cross-validation")
    p.add_argument("--pretrain", help="pseudo-labeled bundle for two-stage training")
    p.add_argument("--jobs", type=int, default=1, help="parallel folds (capped by $%s)" % THREADS_ENV)
    _add_train_flags(p)

    p = sub.add_parser("predict", parents=[common], help="predict with one checkpoint or a fold ensemble")
    p.add_argument("--checkpoint", action="append", required=True,
                   help="checkpoint file or directory of *.ckpt files (repeatable)")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pseudo-label", parents=[common], help="consensus pseudo-labels from model and VLM")
    p.add_argument("--predictions", required=True)
    p.add_argument("--vlm", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--limit", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("vote", parents=[common], help="reliability-weighted vote over prediction files")
    p.add_argument("--predictions", nargs="+", required=True)
    p.add_argument("--truth", help="labels.csv (or bundle dir) used to measure reliabilities")
    p.add_argument("--reliabilities", help="JSON {expert_id: r}; expert id = prediction file stem")
    p.add_argument("--vote-mode", dest="vote_mode", choices=("mass", "count"))
    p.add_argument("--out", required=True)

    p = sub.add_parser("rerank", parents=[common], help="rule-based correction of neutral-topped votes")
    p.add_argument("--predictions", required=True)
    p.add_argument("--vote-mass", dest="vote_mass", required=True)
    p.add_argument("--vlm", help="VLM records; samples without a record skip rule 3")
    p.add_argument("--tau", type=float)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[common], help="classification metrics against truth")
    p.add_argument("--predictions", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out")

    p = sub.add_parser("report-dist", parents=[common], help="class-distribution table")
    p.add_argument("--predictions", nargs="+", required=True)
    p.add_argument("--names", nargs="+")
    p.add_argument("--truth", help="adds a ground-truth row")
    p.add_argument("--out")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all gradient rules")
    p.add_argument("--max-coords", dest="max_coords", type=int, default=300)
    p.add_argument("--fault", choices=("softmax_backward", "gelu_backward", "layer_norm_backward"),
                   help="inject a broken rule (checker sensitivity test)")
    p.add_argument("--out")
    return parser


def _merge(base, override):
    for k, v in override.items():
        if k not in base:
            raise UsageError(f"unknown config key {k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v)
        else:
            base[k] = v
    return base


def effective_config(args, workdir):
    cfg = default_run_config()
    if args.config:
        path = workdir / args.config
        try:
            _merge(cfg, json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{args.config}: invalid JSON at byte {exc.pos}") from None
    for dest, (section, key) in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            cfg[section][key] = value
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _train_config(cfg):
    return TrainConfig(seed=cfg["seed"], **cfg["train"])


def _moe_config(cfg, branches):
    return MoeConfig(list(branches), **cfg["model"])


def _write_run_files(out_dir, args, cfg, inputs, workdir):
    out_dir.mkdir(parents=True, exist_ok=True)
    argv = {k: v for k, v in sorted(vars(args).items()) if k not in ("verbose", "workdir")}
    (out_dir / "run.json").write_text(json.dumps({"command": args.command, "args": argv, "config": cfg},
                                                 indent=2) + "\n", encoding="utf-8")
    lines = []
    for rel in inputs:
        for name, digest in tree_sha256(workdir / rel):
            lines.append(f"{digest}  {rel}:{name}")
    (out_dir / "manifest.txt").write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def _read_truth(path):
    path = Path(path)
    if path.is_dir():
        labels = read_bundle(path).labels
    else:
        labels = read_labels(path)
    return {sid: label_to_index(lab) for sid, lab in labels.items()}


def _checkpoints(workdir, specs):
    paths = []
    for s in specs:
        p = workdir / s
        if p.is_dir():
            found = sorted(p.glob("*.ckpt"))
            if not found:
                raise FileNotFoundError(f"no *.ckpt files in {p}")
            paths.extend(found)
        else:
            paths.append(p)
    return paths


def _expert_names(paths):
    stems = [Path(p).stem for p in paths]
    if len(set(stems)) != len(stems):
        return [f"{i}:{s}" for i, s in enumerate(stems)]
    return stems


def cmd_synth(args, cfg, workdir):
    sc = SynthConfig(seed=cfg["seed"], **cfg["synth"])
    bundle = gen_bundle(sc)
    truth = bundle.label_indices()
    model_preds = gen_noisy_predictions(truth, sc.model_confusion, cfg["seed"] * 2 + 1, ids=bundle.ids)
    vlm_preds = gen_noisy_predictions(truth, sc.vlm_confusion, cfg["seed"] * 2 + 2, ids=bundle.ids)
    records = gen_vlm_records(vlm_preds, cfg["seed"])
    out = workdir / args.out
    _write_run_files(out, args, cfg, [], workdir)
    write_bundle(bundle, out / "bundle")
    write_labels(bundle.labels, bundle.ids, out / "truth.csv")
    write_predictions(model_preds, out / "model_predictions.jsonl")
    write_vlm_records(records, out / "vlm_records.jsonl")
    print(f"wrote {len(bundle)} samples, {len(bundle.branches)} branches to {out}")


def _jobs(requested):
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            return max(1, min(requested, int(cap)))
        except ValueError:
            raise UsageError(f"${THREADS_ENV} must be an integer, got {cap!r}") from None
    return max(1, requested)


def cmd_train(args, cfg, workdir):
    bundle = read_bundle(workdir / args.bundle)
    if not bundle.is_labeled:
        raise DataFormatError(f"{args.bundle}: training needs every sample labeled")
    pretrain = read_bundle(workdir / args.pretrain) if args.pretrain else None
    tc = _train_config(cfg)
    mc = _moe_config(cfg, bundle.branches)
    inputs = [args.bundle] + ([args.pretrain] if args.pretrain else [])
    if args.folds == 1:
        if pretrain is not None:
            model, tlog = two_stage_train(pretrain, bundle, tc, mc)
        else:
            model, tlog = train_supervised(bundle, tc, mc)
        models, records, plan = [model], tlog.records, None
    elif args.folds >= 2:
        models, logs, plan = cross_validate(bundle, tc, mc, args.folds, pretrain, jobs=_jobs(args.jobs))
        records = [r for lg in logs for r in lg.records]
    else:
        raise UsageError("--folds must be >= 1")
    out = workdir / args.out
    _write_run_files(out, args, cfg, inputs, workdir)
    if len(models) == 1:
        models[0].save(out / "model.ckpt")
    else:
        for i, m in enumerate(models):
            m.save(out / f"fold{i + 1}.ckpt")
        write_jsonl([{"fold": i + 1, "train": tr, "val": va} for i, (tr, va) in enumerate(plan.folds)],
                    out / "folds.jsonl")
    write_jsonl(records, out / "train_log.jsonl")
    print(f"trained {len(models)} model(s) -> {out}")


def cmd_predict(args, cfg, workdir):
    paths = _checkpoints(workdir, args.checkpoint)
    models = [MoeModel.load(p) for p in paths]
    bundle = read_bundle(workdir / args.bundle)
    preds = fold_ensemble_predict(models, bundle)
    out = workdir / args.out
    _write_run_files(out, args, cfg, list(args.checkpoint) + [args.bundle], workdir)
    write_predictions(preds, out / "predictions.jsonl")
    print(f"{len(preds)} predictions from {len(models)} model(s) -> {out / 'predictions.jsonl'}")


def cmd_pseudo_label(args, cfg, workdir):
    preds = read_predictions(workdir / args.predictions)
    records = read_vlm_records(workdir / args.vlm)
    bundle = read_bundle(workdir / args.bundle)
    pseudo = consensus_filter(preds, records, limit=args.limit)
    labeled = export_pseudo_bundle(pseudo, bundle)
    report = agreement_report(preds, records)
    report.update(pseudo.diagnostics)
    report["retained"] = len(pseudo)
    out = workdir / args.out
    _write_run_files(out, args, cfg, [args.predictions, args.vlm, args.bundle], workdir)
    write_bundle(labeled, out / "bundle")
    write_pseudo_set(pseudo, out / "pseudo.jsonl")
    (out / "agreement.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    print(f"retained {len(pseudo)} of {report['shared']} shared samples (agreement {report['agreement']:.3f})")


def cmd_vote(args, cfg, workdir):
    if args.truth and args.reliabilities:
        raise UsageError("conflicting flags: --truth and --reliabilities (give one)")
    if not args.truth and not args.reliabilities:
        raise UsageError("vote needs --truth or --reliabilities")
    names = _expert_names(args.predictions)
    experts = {n: read_predictions(workdir / p) for n, p in zip(names, args.predictions)}
    ref = experts[names[0]].ids
    experts = {n: ps.align(ref) for n, ps in experts.items()}
    if args.truth:
        truth = _read_truth(workdir / args.truth)
        eval_ids = [sid for sid in ref if sid in truth]
        if not eval_ids:
            raise DataFormatError("no prediction id has a truth label")
        table = reliability_table({n: ps.align(eval_ids) if len(eval_ids) != len(ref) else ps
                                   for n, ps in experts.items()}, {sid: truth[sid] for sid in eval_ids})
        table = ReliabilityTable(table.entries, len(eval_ids))
    else:
        table = read_reliabilities(workdir / args.reliabilities)
        missing = [n for n in names if n not in table.entries]
        if missing:
            raise DataFormatError(f"reliabilities file has no entry for {missing}")
    voted, mass = weighted_vote([(experts[n], table.entries[n]) for n in names], cfg["rerank"]["vote_mode"])
    out = workdir / args.out
    inputs = list(args.predictions) + [args.truth or args.reliabilities]
    _write_run_files(out, args, cfg, inputs, workdir)
    write_predictions(voted, out / "voted.jsonl")
    write_vote_mass(mass, out / "vote_mass.jsonl")
    write_reliabilities(table, out / "reliabilities.json")
    print("reliabilities: " + ", ".join(f"{n}={table.entries[n]:.4f}" for n in names))


def _subset(ps, ids):
    return ps.align(list(ids))


def cmd_rerank(args, cfg, workdir):
    voted = read_predictions(workdir / args.predictions)
    mass = read_vote_mass(workdir / args.vote_mass)
    if set(voted.ids) != set(mass.ids):
        raise DataFormatError("predictions and vote-mass files cover different ids")
    vlm = {r.id: r.label_index for r in read_vlm_records(workdir / args.vlm)} if args.vlm else {}
    final, changes = rerank(mass, vlm, RerankRuleSet(cfg["rerank"]["tau"]))
    final = _subset(final, voted.ids)
    out = workdir / args.out
    inputs = [args.predictions, args.vote_mass] + ([args.vlm] if args.vlm else [])
    _write_run_files(out, args, cfg, inputs, workdir)
    write_predictions(final, out / "final.jsonl")
    write_jsonl([c.to_dict() for c in changes], out / "changes.jsonl")
    by_rule = {r: sum(1 for c in changes if c.rule == r) for r in (1, 2, 3)}
    print(f"changed {len(changes)} of {len(final)} samples (rule 1: {by_rule[1]}, rule 2: {by_rule[2]}, "
          f"rule 3: {by_rule[3]})")


def cmd_eval(args, cfg, workdir):
    preds = read_predictions(workdir / args.predictions)
    truth = _read_truth(workdir / args.truth)
    truth = {sid: lab for sid, lab in truth.items() if sid in set(preds.ids)} if len(truth) > len(preds) else truth
    report = evaluate(preds, truth)
    print(report.to_text())
    if args.out:
        out = workdir / args.out
        _write_run_files(out, args, cfg, [args.predictions, args.truth], workdir)
        (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
        (out / "metrics.txt").write_text(report.to_text() + "\n", encoding="utf-8")


def cmd_report_dist(args, cfg, workdir):
    names = args.names or [Path(p).stem for p in args.predictions]
    if len(names) != len(args.predictions):
        raise UsageError("--names must match --predictions in count")
    rows = {}
    if args.truth:
        rows["truth"] = [EMOTIONS[v] for v in _read_truth(workdir / args.truth).values()]
    for n, p in zip(names, args.predictions):
        rows[n] = read_predictions(workdir / p).label_names()
    table = format_distribution_table(rows)
    print(table)
    if args.out:
        from .ensemble import distribution_report
        out = workdir / args.out
        _write_run_files(out, args, cfg, list(args.predictions) + ([args.truth] if args.truth else []), workdir)
        (out / "distribution.txt").write_text(table + "\n", encoding="utf-8")
        (out / "distribution.json").write_text(
            json.dumps({k: distribution_report(v) for k, v in rows.items()}, indent=2) + "\n", encoding="utf-8")


def cmd_gradcheck(args, cfg, workdir):
    lines = []
    results = run_suite(seed=cfg["seed"], max_coords=args.max_coords, fault=args.fault, log=lines.append)
    ok = all(r.passed for _, _, r in results)
    lines.append("ALL PASS" if ok else "FAILURES: " + ", ".join(f"{n}/{p}" for n, p, r in results if not r.passed))
    text = "\n".join(lines)
    print(text)
    if args.out:
        out = workdir / args.out
        _write_run_files(out, args, cfg, [], workdir)
        (out / "gradcheck.txt").write_text(text + "\n", encoding="utf-8")
    return EXIT_OK if ok else EXIT_VALIDATION


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "predict": cmd_predict, "pseudo-label": cmd_pseudo_label,
    "vote": cmd_vote, "rerank": cmd_rerank, "eval": cmd_eval, "report-dist": cmd_report_dist,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    workdir = Path(args.workdir)
    try:
        cfg = effective_config(args, workdir)
        rc = COMMANDS[args.command](args, cfg, workdir)
        return EXIT_OK if rc is None else rc
    except (UsageError, DataFormatError, ConfigError, SynthConfigError, UnknownLabelError,
            ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
