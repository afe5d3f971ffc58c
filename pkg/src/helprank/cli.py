"""Command-line interface for reproducible ranking experiments.

Subcommands: ``gen`` (synthetic corpus + splits), ``train``, ``eval``,
``ablate`` (regressor/loss/list-attention grid), ``verify`` (theory
certification battery) and ``routing`` (per-label leaf statistics).  A flat
JSON config file feeds both generation and training; unknown keys are
rejected, absent keys take defaults, and the fully resolved config is
echoed next to the outputs.  The seed resolves as flag > HELPRANK_SEED
environment variable > config file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import datagen, theoria, trainer
from .datagen import GenConfig
from .trainer import DivergenceError, TrainConfig

SEED_ENV_VAR = "HELPRANK_SEED"

CONFIG_DEFAULTS = {
    # corpus generation
    "n_products": 300,
    "reviews_min": 10,
    "reviews_max": 30,
    "d_tok": 32,
    "d_img": 32,
    "tokens_min": 3,
    "tokens_max": 6,
    "regions_min": 2,
    "regions_max": 4,
    "noise_level": 0.1,
    "label_distribution": [0.40, 0.25, 0.15, 0.12, 0.08],
    "split_ratios": [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
    # training
    "loss": "listwise",
    "regressor": "tree",
    "tree_depth": 3,
    "n_trees": 1,
    "fcnn_hidden": [8, 4, 2],
    "listwise_attention": True,
    "lr": 1e-3,
    "batch_size": 32,
    "epochs": 10,
    "d": 16,
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_eps": 1e-8,
    "pooling": "mean",
    "conv_kernel": 3,
    # metrics
    "relevance_tau": 1,
    "ndcg_gain": "exp",
    # shared
    "seed": 0,
}


class ConfigError(ValueError):
    pass


def load_config(path) -> dict:
    """Merge a JSON config file over the defaults, rejecting unknown keys."""
    resolved = dict(CONFIG_DEFAULTS)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc.msg}")
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(user) - set(CONFIG_DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        resolved.update(user)
    return resolved


def resolve_seed(flag_seed, config: dict) -> int:
    if flag_seed is not None:
        return int(flag_seed)
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env!r}")
    return int(config["seed"])


def gen_config_from(config: dict) -> GenConfig:
    return GenConfig(
        n_products=config["n_products"],
        reviews_min=config["reviews_min"],
        reviews_max=config["reviews_max"],
        d_tok=config["d_tok"],
        d_img=config["d_img"],
        tokens_min=config["tokens_min"],
        tokens_max=config["tokens_max"],
        regions_min=config["regions_min"],
        regions_max=config["regions_max"],
        noise_level=config["noise_level"],
        label_distribution=tuple(config["label_distribution"]),
        seed=config["seed"],
    )


def train_config_from(config: dict) -> TrainConfig:
    return TrainConfig(
        loss=config["loss"],
        regressor=config["regressor"],
        tree_depth=config["tree_depth"],
        n_trees=config["n_trees"],
        fcnn_hidden=tuple(config["fcnn_hidden"]),
        listwise_attention=config["listwise_attention"],
        lr=config["lr"],
        batch_size=config["batch_size"],
        epochs=config["epochs"],
        seed=config["seed"],
        d=config["d"],
        beta1=config["beta1"],
        beta2=config["beta2"],
        adam_eps=config["adam_eps"],
        pooling=config["pooling"],
        conv_kernel=config["conv_kernel"],
        relevance_tau=config["relevance_tau"],
        ndcg_gain=config["ndcg_gain"],
    )


def _prepare_out(out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(config: dict, out: Path) -> None:
    with open(out / "resolved_config.json", "w", encoding="utf-8",
              newline="\n") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _load_splits(data_dir) -> tuple:
    data_dir = Path(data_dir)
    parts = []
    for tag in ("train", "val", "test"):
        path = data_dir / f"{tag}.jsonl"
        if not path.exists():
            raise ConfigError(f"missing split file: {path}")
        parts.append(datagen.read_jsonl(path, split_tag=tag))
    d_tok, d_img = parts[0].d_tok, parts[0].d_img
    for ds in parts[1:]:
        if ds.products and (ds.d_tok != d_tok or ds.d_img != d_img):
            raise ConfigError(
                f"schema error: d_tok/d_img ({ds.d_tok}/{ds.d_img}) of "
                f"{ds.split_tag}.jsonl do not match train ({d_tok}/{d_img})"
            )
    return tuple(parts)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    config = load_config(args.config)
    config["seed"] = resolve_seed(args.seed, config)
    print(f"seed: {config['seed']}")
    out = _prepare_out(args.out)
    _echo_config(config, out)

    dataset = datagen.generate(gen_config_from(config))
    splits = datagen.split(dataset, tuple(config["split_ratios"]), config["seed"])
    for ds in splits:
        datagen.write_jsonl(ds, out / f"{ds.split_tag}.jsonl")
        print(f"wrote {ds.split_tag}.jsonl: {len(ds.products)} products, "
              f"{ds.n_reviews()} reviews")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    config["seed"] = resolve_seed(args.seed, config)
    print(f"seed: {config['seed']}")
    out = _prepare_out(args.out)
    _echo_config(config, out)

    splits = _load_splits(args.data)
    artifacts = trainer.train(splits, train_config_from(config))
    _write(out / "report.csv", trainer.reports_to_csv(artifacts.reports))
    trainer.save_checkpoint(
        artifacts.model, splits[0].d_tok, splits[0].d_img, out / "checkpoint.json"
    )
    metrics = {
        "train": artifacts.train_metrics,
        "test": artifacts.test_metrics,
        "delta_map": artifacts.delta_map_value,
        "best_epoch": artifacts.best_epoch,
    }
    _write(out / "metrics.json", json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(f"best epoch: {artifacts.best_epoch}")
    print(f"test MAP: {artifacts.test_metrics['map']:.4f}  "
          f"delta_MAP: {artifacts.delta_map_value:.4f}")
    return 0


def cmd_eval(args) -> int:
    model, d_tok, d_img = trainer.load_checkpoint(args.checkpoint)
    print(f"seed: {model.config.seed}")
    dataset = datagen.read_jsonl(args.data)
    if dataset.products and (dataset.d_tok != d_tok or dataset.d_img != d_img):
        raise ConfigError(
            f"schema error: d_tok/d_img ({dataset.d_tok}/{dataset.d_img}) "
            f"do not match checkpoint ({d_tok}/{d_img})"
        )
    out = _prepare_out(args.out)
    metrics = trainer.evaluate(model, dataset)
    _write(
        out / "metrics.csv",
        "MAP,NDCG3,NDCG5\n"
        f"{metrics['map']:.10g},{metrics['ndcg3']:.10g},{metrics['ndcg5']:.10g}\n",
    )
    print(f"MAP: {metrics['map']:.4f}  NDCG@3: {metrics['ndcg3']:.4f}  "
          f"NDCG@5: {metrics['ndcg5']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args.config)
    config["seed"] = resolve_seed(args.seed, config)
    print(f"seed: {config['seed']}")
    out = _prepare_out(args.out)
    _echo_config(config, out)

    splits = _load_splits(args.data)
    rows = trainer.ablate(splits, train_config_from(config))
    _write(out / "ablation.csv", trainer.ablation_to_csv(rows))
    print(f"wrote ablation.csv: {len(rows)} variants")
    return 0


def cmd_verify(args) -> int:
    config = load_config(args.config)
    config["seed"] = resolve_seed(args.seed, config)
    print(f"seed: {config['seed']}")
    out = _prepare_out(args.out)

    reports = theoria.run_all_checks(args.trials, config["seed"])
    _write(out / "property_report.csv", theoria.reports_to_csv(reports))
    all_pass = True
    for report in reports:
        status = "pass" if report.passed else "FAIL"
        print(f"{status}: {report.name} ({report.violations} violations "
              f"in {report.trials} trials)")
        all_pass = all_pass and report.passed
    return 0 if all_pass else 2


def cmd_routing(args) -> int:
    model, _, _ = trainer.load_checkpoint(args.checkpoint)
    print(f"seed: {model.config.seed}")
    dataset = datagen.read_jsonl(args.data)
    out = _prepare_out(args.out)
    stats = theoria.leaf_routing_stats(model, dataset)
    _write(out / "routing_stats.csv", theoria.routing_stats_to_csv(stats))
    print(f"wrote routing_stats.csv: {stats.shape[0]} labels x "
          f"{stats.shape[1]} leaves")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="helprank",
        description=__doc__,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, data=False, checkpoint=False):
        if config:
            p.add_argument("--config", default=None,
                           help="flat JSON config file (defaults when omitted)")
        if data:
            p.add_argument("--data", required=True,
                           help="dataset directory or JSONL file")
        if checkpoint:
            p.add_argument("--checkpoint", required=True,
                           help="model checkpoint JSON")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help=f"seed override (beats {SEED_ENV_VAR} and config)")

    p = sub.add_parser("gen", help="generate a synthetic corpus and splits",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train a model on generated splits",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p, data=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a JSONL split",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p, config=False, checkpoint=True)
    p.add_argument("--data", required=True, help="JSONL split to evaluate")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the regressor/loss/attention grid",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p, data=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("verify", help="run the theory certification battery",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--trials", type=int, default=1000,
                   help="trials per property check")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("routing", help="per-label leaf routing statistics",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p, config=False, checkpoint=True)
    p.add_argument("--data", required=True, help="JSONL split to analyse")
    p.set_defaults(fn=cmd_routing)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
