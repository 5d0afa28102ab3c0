"""Command-line entry point: generate, train, filter, evaluate, experiment and bounds."""
from pathlib import Path
from typing import List, Optional, Type, TypeVar
import argparse
import json
import logging
import sys

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from ivpsr import __version__
from ivpsr.config import settings
from ivpsr.errors import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, ConfigError, PsrError
from ivpsr.experiments import evaluate_mae, run_experiment
from ivpsr.schemas import (
    BoundsSettings, ExperimentConfig, GeneratorSpec, ModelConfig, SamplerSpec,
)
from ivpsr.seqdata import (
    make_subsystem_lds, read_sequences, sample_bkt_dataset, sample_hmm, sample_lds, save_params,
    write_sequences,
)
from ivpsr.twostage import filter_sequence, fit_predictive_model, load_model, save_model

# Configure logging
logging.basicConfig(
    level=settings.log_level,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

M = TypeVar("M", bound=BaseModel)

PRESETS = {"basis-uniform": "basis_uniform", "sign-cube": "sign_cube", "point-mass": "point_mass"}


class CliParser(argparse.ArgumentParser):
    """Usage errors become ConfigError so they exit with the config code"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def load_json(path: Optional[str], model: Type[M], **overrides) -> M:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return model.model_validate(data)


def _read_data(path: str):
    try:
        return read_sequences(path)
    except FileNotFoundError:
        raise ConfigError(f"data file not found: {path}")


def _out_path(value: Optional[str], default_name: str) -> Path:
    path = Path(value) if value else Path(settings.output_dir) / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# Subcommands
def cmd_generate(args) -> int:
    overrides = dict(system=args.system, seed=args.seed, n_seqs=args.n_seqs, length=args.length)
    if args.params:
        key = "lds" if args.system == "lds" else "hmm"
        try:
            overrides[key] = json.loads(Path(args.params).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read params {args.params}: {e}")
    gen = load_json(args.config, GeneratorSpec, **overrides)

    if gen.system == "bkt":
        params = gen.bkt
        seqs = sample_bkt_dataset(params, gen.n_seqs, gen.min_len, gen.max_len, gen.seed)
    elif gen.system == "hmm":
        params = gen.hmm
        seqs = sample_hmm(params, gen.length, gen.n_seqs, gen.seed)
    else:
        params = make_subsystem_lds(gen.seed) if gen.system == "subsystem_lds" else gen.lds
        seqs = [sample_lds(params, gen.length, gen.seed)]

    out = _out_path(args.out, "sequences.csv")
    write_sequences(seqs, out)
    save_params(params, out.with_name(f"{out.stem}_params.json"))
    logger.info(f"Generated {len(seqs)} {gen.system} sequences into {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_json(args.config, ModelConfig)
    if cfg.plugin not in ("hmm", "gaussian"):
        raise ConfigError(f"plugin {cfg.plugin} cannot be saved; use it through an experiment")
    seqs = _read_data(args.data)
    model = fit_predictive_model(seqs, cfg.feature, cfg.s1, plugin=cfg.plugin, lam=cfg.lam,
                                 s1_xi=cfg.s1_xi, basis_source=cfg.basis_source)
    save_model(model, _out_path(args.out, "model.json"))
    return EXIT_OK


def cmd_filter(args) -> int:
    model = load_model(args.model)
    frames = []
    for seq in _read_data(args.data):
        trace = filter_sequence(model, seq)
        if model.plugin == "hmm":
            values = trace.probabilities()
            columns = [f"p_{x}" for x in range(values.shape[1])]
        else:
            values = trace.means()
            columns = [f"mean_{i + 1}" for i in range(values.shape[1])]
        df = pd.DataFrame(values, columns=columns)
        df.insert(0, "t", np.arange(1, len(seq) + 1))
        df.insert(0, "seq_id", seq.id)
        frames.append(df)
    out = _out_path(args.out, "predictions.csv")
    pd.concat(frames, ignore_index=True).to_csv(out, index=False)
    logger.info(f"Wrote predictions for {len(frames)} sequences to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    report = evaluate_mae(model, _read_data(args.data), warmup=args.warmup, metric=args.metric)
    doc = {"metric": args.metric, "pooled": report.pooled, "mean_per_sequence": report.mean_per_sequence,
           "n_steps": report.n_steps, "n_skipped": report.n_skipped}
    text = json.dumps(doc, indent=2)
    if args.out:
        _out_path(args.out, "evaluation.json").write_text(text)
    print(text)
    return EXIT_OK


def cmd_experiment(args) -> int:
    config = load_json(args.config, ExperimentConfig, experiment=args.id, output_dir=args.output_dir,
                       n_workers=args.workers)
    run_experiment(config)
    logger.info(f"Experiment {config.experiment} finished; artifacts in {config.output_dir}")
    return EXIT_OK


def cmd_bounds(args) -> int:
    opts = BoundsSettings(
        sampler=SamplerSpec(kind=PRESETS[args.preset], dim=args.dim), n_list=args.n, delta=args.delta,
        trials=args.trials, statistic=args.statistic,
    )
    config = ExperimentConfig(experiment="bounds", bounds=opts, generator=GeneratorSpec(seed=args.seed),
                              output_dir=args.output_dir or settings.output_dir)
    df = run_experiment(config)
    print(json.dumps(df.to_dict(orient="records"), indent=2, default=float))
    return EXIT_OK


def build_parser() -> CliParser:
    parser = CliParser(prog="ivpsr", description="Two-stage instrumental regression for predictive state models")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    p = sub.add_parser("generate", help="sample synthetic sequences to CSV")
    p.add_argument("--system", choices=["bkt", "hmm", "lds", "subsystem_lds"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", help="GeneratorSpec JSON")
    p.add_argument("--params", help="HmmParams or LdsParams JSON")
    p.add_argument("--n-seqs", dest="n_seqs", type=int, default=None)
    p.add_argument("--length", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("train", help="fit a predictive state model and save it as JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True, help="ModelConfig JSON")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("filter", help="write one-step predictions for every sequence")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_filter)

    p = sub.add_parser("evaluate", help="held-out MAE of a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metric", choices=["mae", "rmse"], default="mae")
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("experiment", help="run a configured experiment")
    p.add_argument("id", choices=["bkt", "lasso_subsystems", "convergence", "bounds"])
    p.add_argument("--config", help="ExperimentConfig JSON")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(handler=cmd_experiment)

    p = sub.add_parser("bounds", help="Monte Carlo coverage of the covariance bound")
    p.add_argument("--preset", choices=sorted(PRESETS), default="basis-uniform")
    p.add_argument("--n", type=int, nargs="+", default=[100])
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--trials", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=5)
    p.add_argument("--statistic", choices=["xx", "xy"], default="xx")
    p.add_argument("--output-dir", dest="output_dir")
    p.set_defaults(handler=cmd_bounds)
    return parser


def cli_main(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand and map failures to exit codes"""
    try:
        args = build_parser().parse_args(argv)
        return args.handler(args)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_OK
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG
    except PsrError as e:
        logger.error(f"{type(e).__name__}: {e.detail}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(cli_main())
