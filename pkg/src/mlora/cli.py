"""``mlora`` command line: gen, pretrain, finetune, eval, add-domain, params, experiment.

Settings come from an optional ``key = value`` file (``--config``) with ``#``
comments and dotted keys, overridden by ``--key value`` flags.  The whole
configuration is validated before any file is read or written.

Exit codes: 0 ok, 2 config error, 3 missing artifact, 4 conflict, 5 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .checkpoint import read_checkpoint, save_checkpoint
from .data import DEFAULT_BUCKETS, SynthConfig, gen_synthetic, read_dataset, save_dataset, split
from .errors import (
    ConfigError,
    ConflictError,
    DataError,
    FormatError,
    MissingDomainError,
    MLoRAError,
    SchemaError,
)
from .fileio import atomic_write_text
from .model import BACKBONES, FeatureSchema, add_domain, attach_adaptors, build_model, param_report
from .numerics import Rng
from .training import TrainConfig, evaluate, finetune, pretrain

log = logging.getLogger("mlora")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_CONFLICT, EXIT_DATA = 0, 2, 3, 4, 5


# -- value parsers -------------------------------------------------------------------
def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected true/false, got {s!r}")


def _opt_int(s):
    return None if s.strip().lower() in ("", "none") else int(s)


def _ints(s):
    return [int(x) for x in s.split(",") if x.strip()]


def _strs(s):
    return [x.strip() for x in s.split(",") if x.strip()]


def _fields(s):
    out = []
    for item in _strs(s):
        name, _, card = item.partition(":")
        if not name or not card:
            raise ValueError(f"expected name:cardinality, got {item!r}")
        out.append((name.strip(), int(card)))
    return out


def _backbone(s):
    if s not in BACKBONES:
        raise ValueError(f"expected one of {', '.join(BACKBONES)}")
    return s


_TRAIN_KEYS = {
    "learning_rate": float, "dropout": float, "batch_size": int, "patience": int,
    "alpha": float, "max_epochs": int, "seed": int, "rank_cap": _opt_int,
}

# key -> (parser, default, help); defaults are strings run through the parser
KEYS = {
    "data.path": (str, "data/data.csv", "data CSV (written by gen, read by the others)"),
    "data.vocab": (str, "", "vocabulary CSV; default: <data.path stem>.vocab.csv"),
    "data.dense_fields": (_strs, "", "continuous columns to bucketize when no vocabulary exists yet"),
    "data.buckets": (int, str(DEFAULT_BUCKETS), "bucket count for continuous columns"),
    "data.split_seed": (int, "0", "seed of the 60/20/20 per-domain split"),
    "gen.n_domains": (int, str(SynthConfig.n_domains), ""),
    "gen.n_samples": (int, str(SynthConfig.n_samples), ""),
    "gen.power": (float, repr(SynthConfig.power), "power-law exponent of domain sizes"),
    "gen.shift": (float, repr(SynthConfig.shift), "shift magnitude of the smallest domain"),
    "gen.shift_floor": (float, repr(SynthConfig.shift_floor), "largest domain's shift as a fraction of gen.shift"),
    "gen.noise": (float, repr(SynthConfig.noise), "label flip rate"),
    "gen.latent_dim": (int, str(SynthConfig.latent_dim), ""),
    "gen.logit_scale": (float, repr(SynthConfig.logit_scale), ""),
    "gen.bias_spread": (float, repr(SynthConfig.bias_spread), ""),
    "gen.sparse_fields": (_fields, ",".join(f"{n}:{v}" for n, v in SynthConfig.sparse_fields), "name:cardinality list"),
    "gen.n_dense": (int, str(SynthConfig.n_dense), ""),
    "gen.seed": (int, "0", ""),
    "model.backbone": (_backbone, "mlp", "mlp, wdl or deepfm"),
    "model.hidden": (_ints, "64,32,16", "hidden widths"),
    "model.embed_dim": (int, "8", ""),
    "paths.run_dir": (str, "run", "checkpoints, logs and reports go here"),
    "finetune.domains": (_strs, "", "raw domain ids to finetune; default: all in the training split"),
    "eval.checkpoint": (str, "", "checkpoint to evaluate; default: <run_dir>/finetuned.ckpt"),
    "eval.output": (str, "", "EvalResult CSV; default: <run_dir>/eval.csv"),
    "eval.split": (str, "test", "train, validation or test"),
    "eval.attach": (_bool, "false", "attach untrained adaptors for every domain before evaluating"),
    "add.domain": (str, "", "raw id of the domain to add"),
    "add.finetune": (_bool, "true", "finetune the new domain's adaptors"),
    "add.output": (str, "", "output checkpoint; default: overwrite the finetuned checkpoint"),
    "params.checkpoint": (str, "", "report on this checkpoint instead of a schema"),
    "params.fields": (_fields, "user:445789,item:172653", "schema for a report without checkpoint"),
    "params.domains": (int, "10", "domain count for a report without checkpoint"),
    "params.output": (str, "", "optional CSV with the per-layer table"),
    "experiment.seeds": (_ints, "0,1,2,3,4", ""),
}
_desk = TrainConfig.desk()
_ft = {"learning_rate": 0.01, "batch_size": 64}
for _k, _p in _TRAIN_KEYS.items():
    KEYS[f"train.{_k}"] = (_p, str(getattr(_desk, _k)), "pretraining" if _k != "alpha" else "rank divisor")
    KEYS[f"finetune.{_k}"] = (_p, str(_ft.get(_k, "")), f"finetune {_k}; default: train.{_k}")

# keys that name files; left out of the config echo so reruns elsewhere match
PATH_KEYS = {"data.path", "data.vocab", "paths.run_dir", "eval.checkpoint", "eval.output",
             "add.output", "params.checkpoint", "params.output"}


def read_config_file(path) -> dict[str, str]:
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found", key="--config") from None
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key = key.strip()
        if not eq or not key:
            raise ConfigError(f"{path}:{n}: expected 'key = value'", key=key or f"line {n}")
        if key not in KEYS:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}", key=key)
        out[key] = value.strip()
    return out


def resolve(raw: dict[str, str]) -> dict:
    """Parse every key (defaults filled in) and check cross-key constraints."""
    cfg = {}
    for key, (parse, default, _) in KEYS.items():
        text = raw.get(key, default)
        if key.startswith("finetune.") and key[9:] in _TRAIN_KEYS and text == "":
            text = raw.get("train." + key[9:], KEYS["train." + key[9:]][1])
        try:
            cfg[key] = parse(text)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: cannot parse {text!r}: {exc}", key=key) from None
    unknown = set(raw) - set(KEYS)
    if unknown:
        k = sorted(unknown)[0]
        raise ConfigError(f"unknown key {k!r}", key=k)
    if not cfg["data.vocab"]:
        p = Path(cfg["data.path"])
        cfg["data.vocab"] = str(p.with_name(p.stem + ".vocab.csv"))
    run = Path(cfg["paths.run_dir"])
    cfg["eval.checkpoint"] = cfg["eval.checkpoint"] or str(run / "finetuned.ckpt")
    cfg["eval.output"] = cfg["eval.output"] or str(run / "eval.csv")
    cfg["add.output"] = cfg["add.output"] or str(run / "finetuned.ckpt")
    if cfg["eval.split"] not in ("train", "validation", "test"):
        raise ConfigError("eval.split must be train, validation or test", key="eval.split")
    if cfg["data.buckets"] < 2:
        raise ConfigError("data.buckets must be >= 2", key="data.buckets")
    if not cfg["model.hidden"] or min(cfg["model.hidden"]) < 1:
        raise ConfigError("model.hidden must list positive widths", key="model.hidden")
    if cfg["model.embed_dim"] < 1:
        raise ConfigError("model.embed_dim must be >= 1", key="model.embed_dim")
    if cfg["params.domains"] < 1:
        raise ConfigError("params.domains must be >= 1", key="params.domains")
    train_config(cfg).validate()
    try:
        train_config(cfg, "finetune").validate()
    except ConfigError as exc:
        key = exc.key.replace("train.", "finetune.")
        raise ConfigError(str(exc).replace("train.", "finetune."), key=key) from None
    try:
        synth_config(cfg).validate()
    except MLoRAError as exc:
        raise ConfigError(f"gen: {exc}", key="gen") from None
    return cfg


def train_config(cfg, prefix="train") -> TrainConfig:
    return TrainConfig(**{k: cfg[f"{prefix}.{k}"] for k in _TRAIN_KEYS})


def synth_config(cfg) -> SynthConfig:
    return SynthConfig(
        n_domains=cfg["gen.n_domains"], n_samples=cfg["gen.n_samples"], power=cfg["gen.power"],
        sparse_fields=tuple(cfg["gen.sparse_fields"]), n_dense=cfg["gen.n_dense"],
        latent_dim=cfg["gen.latent_dim"], shift=cfg["gen.shift"], shift_floor=cfg["gen.shift_floor"],
        logit_scale=cfg["gen.logit_scale"], bias_spread=cfg["gen.bias_spread"], noise=cfg["gen.noise"],
        seed=cfg["gen.seed"],
    )


def config_echo(cfg) -> dict:
    """Reproducibility record stored in checkpoints; no file paths."""
    out = {}
    for k, v in sorted(cfg.items()):
        if k in PATH_KEYS:
            continue
        out[k] = [list(x) if isinstance(x, tuple) else x for x in v] if isinstance(v, list) else v
    return out


# -- shared steps ------------------------------------------------------------------------
def _require(path, what):
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")


def _load_splits(cfg):
    _require(cfg["data.path"], "data file")
    ds = read_dataset(cfg["data.path"], cfg["data.vocab"], cfg["data.dense_fields"], cfg["data.buckets"])
    if ds.row_errors:
        print(f"warning: {len(ds.row_errors)} rows rejected (first: {ds.row_errors[0]})", file=sys.stderr)
    if len(ds) == 0:
        raise DataError(f"{cfg['data.path']}: no usable rows")
    return ds, split(ds, seed=cfg["data.split_seed"])


def _check_schema(model, ds, path):
    if model.schema != ds.schema:
        raise DataError(f"data schema does not match checkpoint {path}")


def _run_dir(cfg):
    return Path(cfg["paths.run_dir"])


def _domain_ids(ds, names, key):
    ids = []
    for raw in names:
        if raw not in ds.vocab.domains:
            raise ConfigError(f"{key}: domain {raw!r} is not in the vocabulary", key=key)
        ids.append(ds.vocab.domains[raw])
    return ids


def _figures():
    from . import reporting  # matplotlib import is deferred until a figure is drawn
    return reporting


# -- commands ----------------------------------------------------------------------------
def cmd_gen(cfg):
    ds = gen_synthetic(synth_config(cfg))
    save_dataset(ds, cfg["data.path"], cfg["data.vocab"])
    sizes = ", ".join(f"{ds.vocab.domain_names()[t]}:{s}" for t, s in ds.sizes.items())
    print(f"wrote {len(ds)} rows to {cfg['data.path']} (domain sizes {sizes})")
    return EXIT_OK


def cmd_pretrain(cfg):
    ds, (train, val, _) = _load_splits(cfg)
    tcfg = train_config(cfg)
    model = build_model(ds.schema, cfg["model.hidden"], cfg["model.embed_dim"], cfg["model.backbone"],
                        tcfg.alpha, Rng(tcfg.seed).derive(11), tcfg.rank_cap)
    tlog = pretrain(model, train, val, tcfg)
    run = _run_dir(cfg)
    save_checkpoint(model, "pretrained", run / "pretrained.ckpt", config_echo(cfg))
    atomic_write_text(run / "pretrain_log.csv", tlog.to_csv())
    _figures().plot_training_log(run / "pretrain_curve.png", tlog, "pretraining")
    best = tlog.best_epoch.get("mixed", 0)
    score = tlog.records[best - 1].val_wauc if best else float("nan")
    print(f"pretrained {len(tlog)} epochs; best epoch {best}, validation WAUC {score:.6f}")
    return EXIT_OK


def cmd_finetune(cfg):
    src = _run_dir(cfg) / "pretrained.ckpt"
    _require(src, "pretrained checkpoint")
    ds, (train, val, _) = _load_splits(cfg)
    ck = read_checkpoint(src)
    if ck.phase != "pretrained":
        raise ConflictError(f"{src} is a {ck.phase} checkpoint, expected pretrained")
    model = ck.model()
    _check_schema(model, ds, src)
    tcfg = train_config(cfg, "finetune")
    domains = _domain_ids(ds, cfg["finetune.domains"], "finetune.domains") or train.domains
    attach_adaptors(model, domains, alpha=tcfg.alpha, cap=tcfg.rank_cap, rng=Rng(tcfg.seed).derive(12))
    tlog = finetune(model, train, val, tcfg, domains)
    run = _run_dir(cfg)
    save_checkpoint(model, "finetuned", run / "finetuned.ckpt", config_echo(cfg))
    atomic_write_text(run / "finetune_log.csv", tlog.to_csv())
    _figures().plot_training_log(run / "finetune_curve.png", tlog, "finetuning")
    print(f"finetuned adaptors for {len(domains)} domains; best epochs "
          + ", ".join(f"{ds.vocab.domain_names()[int(t)]}:{e}" for t, e in tlog.best_epoch.items()))
    return EXIT_OK


def cmd_eval(cfg):
    path = cfg["eval.checkpoint"]
    _require(path, "checkpoint")
    ds, (train, val, test) = _load_splits(cfg)
    part = {"train": train, "validation": val, "test": test}[cfg["eval.split"]]
    ck = read_checkpoint(path)
    model = ck.model()
    _check_schema(model, ds, path)
    if cfg["eval.attach"]:
        missing = [t for t in ds.domains if t not in model.domains]
        attach_adaptors(model, missing, rng=Rng(0))
    names = ds.vocab.domain_names()
    res = evaluate(model, part, "eval")
    out = Path(cfg["eval.output"])
    atomic_write_text(out, res.to_csv(names))
    baseline = evaluate(model, part, "pretrain") if model.domains else None
    _figures().plot_domain_auc(out.with_suffix(".png"), res, baseline, names,
                               f"{ck.phase} checkpoint, {cfg['eval.split']} split")
    print(f"WAUC {res.wauc:.6f} ({res.wauc_percent:.4f}%) on {len(part)} {cfg['eval.split']} samples")
    if baseline is not None:
        print(f"backbone-only WAUC {baseline.wauc:.6f}; lift {100 * (res.wauc - baseline.wauc):+.4f} pp")
    return EXIT_OK


def cmd_add_domain(cfg):
    src = _run_dir(cfg) / "finetuned.ckpt"
    if not cfg["add.domain"]:
        raise ConfigError("add.domain is required", key="add.domain")
    _require(src, "finetuned checkpoint")
    ds, (train, val, _) = _load_splits(cfg)
    model = read_checkpoint(src).model()
    _check_schema(model, ds, src)
    (t,) = _domain_ids(ds, [cfg["add.domain"]], "add.domain")
    tcfg = train_config(cfg, "finetune")
    add_domain(model, t, Rng(tcfg.seed).derive(13, t))
    if cfg["add.finetune"]:
        if t not in train.sizes:
            raise DataError(f"domain {cfg['add.domain']!r} has no training rows")
        finetune(model, train, val, tcfg, [t])
    save_checkpoint(model, "finetuned", cfg["add.output"], config_echo(cfg))
    print(f"added domain {cfg['add.domain']} -> {cfg['add.output']}")
    return EXIT_OK


def cmd_params(cfg):
    if cfg["params.checkpoint"]:
        _require(cfg["params.checkpoint"], "checkpoint")
        model = read_checkpoint(cfg["params.checkpoint"]).model()
    else:
        schema = FeatureSchema(tuple(cfg["params.fields"]), (), cfg["params.domains"])
        tcfg = train_config(cfg)
        model = build_model(schema, cfg["model.hidden"], cfg["model.embed_dim"], cfg["model.backbone"],
                            tcfg.alpha, Rng(0), tcfg.rank_cap)
        attach_adaptors(model, range(schema.n_domains))
    rep = param_report(model)
    print(rep.format())
    if cfg["params.output"]:
        rows = ["layer,d_in,d_out,rank,domains,adaptor_params"]
        rows += [f"{lp.name},{lp.d_in},{lp.d_out},{lp.rank},{lp.n_domains},{lp.adaptor_params}"
                 for lp in rep.layers]
        rows.append(f"total_backbone,,,,,{rep.backbone_params}")
        rows.append(f"total_adaptor,,,,,{rep.adaptor_params}")
        atomic_write_text(cfg["params.output"], "\n".join(rows) + "\n")
    return EXIT_OK


def cmd_experiment(cfg):
    from .experiment import ExperimentConfig, run_experiment, summary_csv

    ecfg = ExperimentConfig(cfg["model.backbone"], tuple(cfg["model.hidden"]), cfg["model.embed_dim"],
                            synth_config(cfg), train_config(cfg), train_config(cfg, "finetune"))
    results = run_experiment(ecfg, cfg["experiment.seeds"])
    run = _run_dir(cfg)
    atomic_write_text(run / "experiment.csv", summary_csv(results))
    _figures().plot_lifts(run / "experiment_lift.png", results, f"{cfg['model.backbone']} backbone")
    for r in results:
        print(f"seed {r.seed}: pretrained {r.base.wauc:.6f} finetuned {r.tuned.wauc:.6f} "
              f"lift {r.lift_pp:+.3f} pp")
    mean = sum(r.lift_pp for r in results) / len(results)
    wins = sum(r.sparse_domain_wins() for r in results)
    print(f"mean lift {mean:+.3f} pp; smallest domain at or above median lift in {wins}/{len(results)} seeds")
    return EXIT_OK


COMMANDS = {
    "gen": (cmd_gen, "write a synthetic multi-domain CSV and its vocabulary"),
    "pretrain": (cmd_pretrain, "train the shared backbone, save run_dir/pretrained.ckpt"),
    "finetune": (cmd_finetune, "attach and train per-domain adaptors, save run_dir/finetuned.ckpt"),
    "eval": (cmd_eval, "per-domain AUC and WAUC of a checkpoint"),
    "add-domain": (cmd_add_domain, "add adaptors for one more domain to a finetuned checkpoint"),
    "params": (cmd_params, "backbone vs. adaptor parameter counts"),
    "experiment": (cmd_experiment, "synthetic pretrained-vs-finetuned lift over several seeds"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: config error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser():
    parser = _Parser(prog="mlora", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        for key, (_, default, key_help) in KEYS.items():
            p.add_argument(f"--{key}", dest=key, metavar="VALUE", default=None,
                           help=f"{key_help + '; ' if key_help else ''}default {default!r}")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        raw = read_config_file(args.config) if args.config else {}
        raw.update({k: v for k, v in vars(args).items() if k in KEYS and v is not None})
        cfg = resolve(raw)
        return func(cfg)
    except ConfigError as exc:
        print(f"config error [{exc.key}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, MissingDomainError) as exc:
        print(f"missing: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConflictError as exc:
        print(f"conflict: {exc}", file=sys.stderr)
        return EXIT_CONFLICT
    except (DataError, SchemaError, FormatError, MLoRAError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
