"""Command-line pipeline: corpus generation, training, inference,
evaluation and loss-distribution analysis.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import data as D
from . import losses as L
from . import model as M
from . import postproc as P
from . import tensor as T
from . import train as R
from .errors import CIANetError, ContractError, DataError, DomainError, NumericError


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _set_by_dotted_path(d, dotted, raw):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        if k not in cur or not isinstance(cur[k], dict):
            raise ContractError(f"config has no section {k!r} (from --set {dotted})")
        cur = cur[k]
    if keys[-1] not in cur:
        raise ContractError(f"config has no key {keys[-1]!r} (from --set {dotted})")
    cur[keys[-1]] = value


def _load_json_config(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        raise DataError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"bad JSON in config {path}: {e}") from e


def build_parser():
    parser = _Parser(prog="cianet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    p.add_argument("--config", help="corpus config JSON")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--seed", type=int, help="override corpus seed")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a dotted config key")

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--loss", choices=L.NUCLEI_LOSSES)
    p.add_argument("--gamma", type=float)
    p.add_argument("--no-iam", action="store_true")
    p.add_argument("--preset", choices=sorted(R.EXPERIMENT_PRESETS))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("infer", help="write probability maps and instance maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test-seen")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override post-processing keys")

    p = sub.add_parser("eval", help="score predicted instance maps against a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split")

    p = sub.add_parser("analyze-loss", help="emit the sorted cumulative loss-share curve")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test-seen")
    p.add_argument("--out", required=True)
    p.add_argument("--loss", default="bce", choices=L.NUCLEI_LOSSES)
    p.add_argument("--gamma", type=float, default=0.2)
    p.add_argument("--region", default="foreground", choices=("foreground", "all"))
    return parser


def _cmd_gen(args):
    cfg_dict = _load_json_config(args.config)
    base = D.CorpusConfig().to_dict()
    base.update(cfg_dict)
    for kv in args.set:
        key, _, raw = kv.partition("=")
        _set_by_dotted_path(base, key, raw)
    if args.seed is not None:
        base["seed"] = args.seed
    cfg = D.CorpusConfig.from_dict(base)
    progress = None
    if args.verbose:
        progress = lambda split, i, n: print(f"[gen] {split} {i + 1}/{n}", file=sys.stderr)
    manifest = D.write_corpus(args.out, cfg, progress=progress)
    print(f"wrote {len(manifest['samples'])} samples to {args.out}")
    return 0


def _cmd_train(args):
    cfg_dict = R.TrainConfig().to_dict()
    cfg_dict_file = _load_json_config(args.config)
    for section, value in cfg_dict_file.items():
        if isinstance(value, dict) and section in cfg_dict and isinstance(cfg_dict[section], dict):
            cfg_dict[section].update(value)
        else:
            cfg_dict[section] = value
    for kv in args.set:
        key, _, raw = kv.partition("=")
        _set_by_dotted_path(cfg_dict, key, raw)
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    if args.loss is not None:
        cfg_dict["loss"]["nuclei_loss"] = args.loss
    if args.gamma is not None:
        cfg_dict["loss"]["gamma"] = args.gamma
    if args.no_iam:
        cfg_dict["model"]["use_iam"] = False
    cfg = R.TrainConfig.from_dict(cfg_dict)
    if args.preset:
        cfg = R.apply_preset(cfg, args.preset)
    result = R.run_training(cfg, args.corpus, args.out, log_every=50 if args.verbose else 0)
    with open(os.path.join(args.out, "train_config.json"), "w") as f:
        json.dump(cfg.to_dict(), f, sort_keys=True, indent=2)
    if result.numeric_failure:
        raise NumericError(
            f"training diverged: final loss {result.losses[-1] if result.losses else 'n/a'}"
        )
    print(f"trained {cfg.epochs} epochs; final loss {result.losses[-1]:.4f}; "
          f"checkpoint {result.checkpoint_path}")
    return 0


def _post_config(args):
    d = P.PostConfig().to_dict()
    for kv in getattr(args, "set", []):
        key, _, raw = kv.partition("=")
        _set_by_dotted_path(d, key, raw)
    if getattr(args, "threshold", None) is not None:
        d["threshold"] = args.threshold
    return P.PostConfig.from_dict(d)


def _cmd_infer(args):
    net = M.load_checkpoint(args.checkpoint)
    post = _post_config(args)
    manifest = D.load_manifest(args.corpus)
    entries = [e for e in manifest["samples"] if e["split"] == args.split]
    if not entries:
        raise DataError(f"corpus has no samples in split {args.split!r}")
    os.makedirs(args.out, exist_ok=True)
    for entry, rec in D.iter_split(args.corpus, manifest, args.split):
        pn, pc = R.predict_probs(net, rec.image, tile_size=0)
        pred = P.extract_instances(pn, pc, post)
        name = os.path.splitext(os.path.basename(entry["labels"]))[0]
        D.write_labels_png(os.path.join(args.out, f"{name}.png"), pred)
        T.write_nmap(os.path.join(args.out, f"{name}_nuclei.nmap"), pn[None, None])
        T.write_nmap(os.path.join(args.out, f"{name}_contour.nmap"), pc[None, None])
        if args.verbose:
            print(f"[infer] {name}: {pred.max()} instances", file=sys.stderr)
    print(f"wrote predictions for {len(entries)} images to {args.out}")
    return 0


def _cmd_eval(args):
    from .metrics import evaluate_corpus

    manifest = D.load_manifest(args.corpus)
    report = evaluate_corpus(args.corpus, args.pred, manifest, split=args.split)
    os.makedirs(args.out, exist_ok=True)
    report.write_csv(os.path.join(args.out, "metrics.csv"))
    report.write_json(os.path.join(args.out, "metrics.json"))
    summary = report.summary()
    for split, means in summary["split_means"].items():
        print(f"{split}: aji {means['aji']:.4f} f1 {means['f1']:.4f} over {means['n_images']} images")
    if report.missing:
        print(f"missing predictions: {', '.join(report.missing)}", file=sys.stderr)
        return 2
    return 0


def _cmd_analyze_loss(args):
    net = M.load_checkpoint(args.checkpoint)
    loss_cfg = L.LossConfig(nuclei_loss=args.loss, gamma=args.gamma)
    points, degenerate = R.analyze_loss_cdf(net, args.corpus, args.split, loss_cfg, region=args.region)
    os.makedirs(args.out, exist_ok=True)
    tag = args.loss if args.loss != "smooth_truncated" else f"smooth_truncated_g{args.gamma:g}"
    csv_path = os.path.join(args.out, f"loss_cdf_{args.split}_{tag}.csv")
    L.write_loss_cdf_csv(csv_path, points)
    share = L.top_share(points, 0.1)
    print(f"wrote {csv_path}; top-10% samples carry {share * 100:.1f}% of total loss"
          + (" (degenerate: all losses zero)" if degenerate else ""))
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "analyze-loss": _cmd_analyze_loss,
}


def dispatch(argv):
    """Parse and run one subcommand; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_help()
        return 1
    try:
        return _COMMANDS[args.command](args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except (ContractError, DomainError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except CIANetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main(argv=None):
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
