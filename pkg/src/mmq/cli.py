"""Configuration-driven experiment runner.

Subcommands: run, compare, validate-config, inspect-checkpoint. Configs are
JSON with exactly one command section among {stage1, pipeline, baseline,
ablation, sweep_length, sweep_experts}; unknown keys are rejected. Exit
codes: 0 ok, 2 config error, 3 numeric abort, 4 IO error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import experiments as ex
from . import finetune as ft
from . import tokenizer as tok
from .baselines import RqVaeOptions
from .data import read_embeddings
from .metrics import MetricsReport
from .tensor import FormatError, MmqError, NumericError, read_model_container


class ConfigError(MmqError):
    pass


EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

COMMAND_SECTIONS = ("stage1", "pipeline", "baseline", "ablation",
                    "sweep_length", "sweep_experts")
TOP_KEYS = {"seed", "out", "data", "eval", *COMMAND_SECTIONS}

SECTION_KEYS = {
    "data": {"synthetic", "embeddings", "interactions"},
    "eval": {"n", "strata", "auc"},
    "stage1": {"tokenizer", "train"},
    "pipeline": {"tokenizer", "train", "finetune"},
    "baseline": {"method", "paradigm", "k", "levels_ma", "levels_ms", "baf",
                 "vae_options", "finetune"},
    "ablation": {"tokenizer", "train", "finetune", "rows"},
    "sweep_length": {"tokenizer", "train", "finetune", "lengths"},
    "sweep_experts": {"tokenizer", "train", "finetune", "variants"},
}


def _reject_unknown(d: dict, allowed, where: str):
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)} in {where}")


def _build(cls, section: dict, where: str):
    try:
        return cls(**section)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from None


def validate_config(cfg: dict) -> str:
    """Returns the command section name; raises ConfigError on any problem."""
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    _reject_unknown(cfg, TOP_KEYS, "config root")
    if "seed" not in cfg or not isinstance(cfg["seed"], int):
        raise ConfigError("config requires an integer 'seed'")
    if "data" not in cfg:
        raise ConfigError("config requires a 'data' section")
    present = [s for s in COMMAND_SECTIONS if s in cfg]
    if len(present) != 1:
        raise ConfigError(
            f"config must contain exactly one command section of {COMMAND_SECTIONS}, "
            f"found {present or 'none'}")
    for name in ("data", "eval", present[0]):
        if name in cfg:
            if not isinstance(cfg[name], dict):
                raise ConfigError(f"section {name!r} must be an object")
            _reject_unknown(cfg[name], SECTION_KEYS[name], f"section {name!r}")
    # dry-build the component configs for field-level errors
    section = cfg[present[0]]
    seed = cfg["seed"]
    if "synthetic" in cfg["data"]:
        _build(ex.SyntheticConfig, {"seed": seed, **cfg["data"]["synthetic"]},
               "data.synthetic")
    if "tokenizer" in section:
        _build(tok.TokenizerConfig, {"seed": seed, **_tupled(section["tokenizer"])},
               f"{present[0]}.tokenizer")
    if "train" in section:
        _build(ex.TrainParams, section["train"], f"{present[0]}.train")
    if "finetune" in section:
        _build(ft.FinetuneConfig, {"seed": seed, **section["finetune"]},
               f"{present[0]}.finetune")
    return present[0]


def _tupled(tok_section: dict) -> dict:
    d = dict(tok_section)
    for key in ("expert_hidden", "gate_hidden", "decoder_hidden"):
        if key in d:
            d[key] = tuple(d[key])
    return d


def _log_line(quiet, payload):
    if not quiet:
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def _report_payload(cfg_dict, label, report: MetricsReport):
    return {"run": label, "config_hash": ex.config_hash(cfg_dict),
            "metrics": report.as_dict()}


def run_config(cfg: dict, out_dir: str, quiet=False) -> dict:
    """Execute the config's pipeline; writes artifacts under out_dir and
    returns the metrics payload."""
    command = validate_config(cfg)
    os.makedirs(out_dir, exist_ok=True)
    seed = cfg["seed"]
    eval_cfg = cfg.get("eval", {})
    n_list = tuple(eval_cfg.get("n", (5, 10)))
    strata = bool(eval_cfg.get("strata", False))
    with_auc = bool(eval_cfg.get("auc", False))

    data_cfg = dict(cfg["data"])
    if "synthetic" in data_cfg:
        data_cfg["synthetic"] = {"seed": seed, **data_cfg["synthetic"]}
    items, interactions = ex.load_data_section(data_cfg, out_dir)
    section = cfg[command]

    def tok_cfg(extra=None):
        d = {"seed": seed, **_tupled(section.get("tokenizer", {}))}
        if extra:
            d.update(extra)
        return tok.TokenizerConfig(**d)

    def train_params():
        return ex.TrainParams(**section.get("train", {}))

    def ft_cfg():
        return ft.FinetuneConfig(seed=seed, **section.get("finetune", {}))

    def log_fn(epoch, value):
        payload = value.as_dict() if hasattr(value, "as_dict") else {"loss": value}
        _log_line(quiet, {"epoch": epoch, **payload})

    if command == "stage1":
        model = tok.TokenizerModel(tok_cfg())
        tp = train_params()
        tok.train_stage1(model, items, epochs=tp.epochs, batch_size=tp.batch_size,
                         lr=tp.lr, log_fn=log_fn)
        tok.save_tokenizer(model, os.path.join(out_dir, "tokenizer.mmqc"), stage=1)
        codes = tok.tokenize_dataset(model, items)
        ex.write_semantic_ids(os.path.join(out_dir, "semantic_ids.tsv"),
                              items.item_ids, codes)
        report = MetricsReport(quant=tok.eval_quant_metrics(model, items))
        payload = _report_payload(cfg, "stage1", report)

    elif command == "pipeline":
        result = ex.run_mmq(items, interactions, tok_cfg(), train_params(), ft_cfg(),
                            baf=True, eval_strata=strata, eval_auc=with_auc,
                            n_list=n_list, log_fn=log_fn)
        tok.save_tokenizer(result.tokenizer, os.path.join(out_dir, "tokenizer.mmqc"),
                           stage=2)
        codes = tok.tokenize_dataset(result.tokenizer, items)
        ex.write_semantic_ids(os.path.join(out_dir, "semantic_ids.tsv"),
                              items.item_ids, codes)
        payload = _report_payload(cfg, "mmq", result.report)

    elif command == "baseline":
        _reject_unknown(section, SECTION_KEYS["baseline"], "baseline")
        vopt = RqVaeOptions(**section.get("vae_options", {})) if "vae_options" in section else None
        fcfg = ft.FinetuneConfig(seed=seed, **section.get("finetune", {}))
        result = ex.run_baseline(
            items, interactions, section["method"], section["paradigm"],
            k=int(section.get("k", 100)), fcfg=fcfg,
            levels_ma=int(section.get("levels_ma", 6)),
            levels_ms=tuple(section.get("levels_ms", (3, 3))),
            seed=seed, baf=bool(section.get("baf", False)), vae_options=vopt,
            eval_strata=strata, eval_auc=with_auc, n_list=n_list, log_fn=log_fn)
        norm = items.normalized()
        codes = result.baseline.tokenize_batch(norm)
        ex.write_semantic_ids(os.path.join(out_dir, "semantic_ids.tsv"),
                              items.item_ids, codes)
        payload = _report_payload(cfg, result.label, result.report)

    elif command == "ablation":
        rows = tuple(section.get("rows", ex.ABLATION_ROWS))
        results = ex.run_ablation_grid(items, interactions, tok_cfg(), train_params(),
                                       ft_cfg(), rows=rows, n_list=n_list, log_fn=log_fn)
        payload = {"run": "ablation", "config_hash": ex.config_hash(cfg),
                   "rows": {row: r.report.as_dict() for row, r in results.items()}}
        for row, r in results.items():
            ex.write_metrics_json(os.path.join(out_dir, f"metrics_{row}.json"),
                                  _report_payload(cfg, row, r.report))

    elif command == "sweep_length":
        lengths = tuple(section.get("lengths", (6, 9, 12)))
        results = ex.run_length_sweep(items, interactions, tok_cfg(), train_params(),
                                      ft_cfg(), lengths=lengths, n_list=n_list,
                                      log_fn=log_fn)
        payload = {"run": "sweep_length", "config_hash": ex.config_hash(cfg),
                   "lengths": {str(l): r.report.as_dict() for l, r in results.items()}}

    else:  # sweep_experts
        variants = {name: v for name, v in section.get("variants", {}).items()}
        results = ex.run_expert_sweep(items, interactions, tok_cfg(), train_params(),
                                      ft_cfg(), variants, n_list=n_list, log_fn=log_fn)
        payload = {"run": "sweep_experts", "config_hash": ex.config_hash(cfg),
                   "variants": {name: r.report.as_dict() for name, r in results.items()}}

    ex.write_metrics_json(os.path.join(out_dir, "metrics.json"), payload)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")
    return payload


# --------------------------------------------------------------------------
# compare
# --------------------------------------------------------------------------

LOWER_IS_BETTER = {"recon_loss"}


def compare_runs(run_dirs):
    """Aligned metric table over completed runs; the last run is the candidate
    and the improvement row is relative to the best of the other runs."""
    if len(run_dirs) < 2:
        raise ValueError("compare needs at least two completed runs")
    rows = []
    for d in run_dirs:
        path = os.path.join(d, "metrics.json")
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing metrics file for run {d!r}")
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
        if "metrics" not in payload:
            raise ValueError(f"run {d!r} is not a single-run metrics file")
        rows.append((payload.get("run", os.path.basename(d)), payload["metrics"]))

    keys = sorted({k for _, m in rows for k, v in m.items()
                   if isinstance(v, (int, float))})
    table = {label: {k: m.get(k) for k in keys} for label, m in rows}

    improv = {}
    if len(rows) >= 2:
        cand_label, cand = rows[-1]
        for k in keys:
            base_vals = [m.get(k) for _, m in rows[:-1] if m.get(k) is not None]
            cv = cand.get(k)
            if cv is None or not base_vals:
                continue
            if k in LOWER_IS_BETTER:
                best = min(base_vals)
                improv[k] = (best - cv) / abs(best) * 100.0 if best else 0.0
            else:
                best = max(base_vals)
                improv[k] = (cv - best) / abs(best) * 100.0 if best else 0.0
    return {"runs": dict(table), "improvement_pct": improv,
            "candidate": rows[-1][0] if rows else None}


def format_compare_table(result) -> str:
    runs = result["runs"]
    keys = sorted({k for m in runs.values() for k in m})
    width = max((len(k) for k in keys), default=6) + 2
    label_w = max((len(l) for l in runs), default=4) + 2
    lines = [" " * label_w + "".join(f"{k:>{width}}" for k in keys)]
    for label, m in runs.items():
        cells = "".join(
            f"{m[k]:>{width}.4f}" if isinstance(m.get(k), (int, float)) else f"{'-':>{width}}"
            for k in keys)
        lines.append(f"{label:<{label_w}}" + cells)
    imp = result["improvement_pct"]
    cells = "".join(
        f"{imp[k]:>+{width - 1}.2f}%" if k in imp else f"{'-':>{width}}" for k in keys)
    lines.append(f"{'Improv.':<{label_w}}" + cells)
    return "\n".join(lines)


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def _cmd_run(args) -> int:
    try:
        with open(args.config, "r", encoding="utf-8") as f:
            cfg = json.load(f)
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as e:
        print(f"config error: invalid JSON: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        cfg["seed"] = args.seed
    out_dir = args.out or cfg.get("out")
    if not out_dir:
        print("config error: no output dir (config 'out' or --out)", file=sys.stderr)
        return EXIT_CONFIG
    try:
        payload = run_config(cfg, out_dir, quiet=args.quiet)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    if not args.quiet:
        print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_compare(args) -> int:
    try:
        result = compare_runs(args.runs)
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    print(format_compare_table(result))
    if args.json:
        with open(args.json, "w", encoding="utf-8") as f:
            json.dump(result, f, indent=2, sort_keys=True)
            f.write("\n")
    return EXIT_OK


def _cmd_validate(args) -> int:
    try:
        with open(args.config, "r", encoding="utf-8") as f:
            cfg = json.load(f)
        command = validate_config(cfg)
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as e:
        print(f"config error: invalid JSON: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"ok: {command}")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    try:
        header, params = read_model_container(args.checkpoint)
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    total = sum(int(np.prod(a.shape)) for _, a in params)
    print(json.dumps({"header": header,
                      "parameters": [{"name": n, "shape": list(a.shape)} for n, a in params],
                      "total_values": total}, indent=2, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mmq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None, help="override config seed")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--quiet", action="store_true")
    p_run.set_defaults(fn=_cmd_run)

    p_cmp = sub.add_parser("compare", help="tabulate metrics across run dirs")
    p_cmp.add_argument("runs", nargs="+")
    p_cmp.add_argument("--json", default=None, help="also write the table as JSON")
    p_cmp.set_defaults(fn=_cmd_compare)

    p_val = sub.add_parser("validate-config", help="check a config without running")
    p_val.add_argument("--config", required=True)
    p_val.set_defaults(fn=_cmd_validate)

    p_ins = sub.add_parser("inspect-checkpoint", help="print checkpoint header and shapes")
    p_ins.add_argument("checkpoint")
    p_ins.set_defaults(fn=_cmd_inspect)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
