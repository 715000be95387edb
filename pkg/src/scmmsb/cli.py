"""Command-line front end with one subcommand per pipeline stage.

Command-line flags override a ``key = value`` config file given with
``--config``, which overrides the built-in defaults. The seed falls back to
the ``DYNET_SEED`` environment variable before its default.

Exit codes: 0 success, 2 usage or configuration error, 3 data or I/O error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .evaluate import (
    DEFAULT_KAPPA,
    DEFAULT_LOCAL_FLOOR,
    aic,
    align_labels,
    change_report,
    dyad_log_predictive,
    param_count,
    recovery_error,
)
from .model import DomainError, GroundTruth, ModelParams, generate_synthetic
from .network import DynamicNetwork, MalformedInputError, load_snapshots, write_snapshots
from .sgld import NumericalError, PosteriorSummary, SgldConfig, SgldSampler

log = logging.getLogger("scmmsb")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


class ConfigError(Exception):
    """Bad or inconsistent settings; maps to exit code 2."""


class DataError(Exception):
    """Unreadable or malformed inputs, or unwritable outputs; exit code 3."""


def _bool(text: str) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# name -> (parser, default, help). Sampler fields take their defaults from SgldConfig.
_SAMPLER_KEYS = {
    "K": (int, "number of communities"),
    "step_a": (float, "step schedule a"),
    "step_b": (float, "step schedule b"),
    "step_c": (float, "step schedule c"),
    "minibatch_fraction": (float, "share of non-link dyads per iteration"),
    "link_fraction": (float, "share of link dyads per iteration"),
    "num_iterations": (int, "total iterations"),
    "burn_in": (int, "iterations discarded before averaging"),
    "sparse_mode": (_bool, "truncated Laplace prior on beta (false = non-sparse mode)"),
    "param_update_every": (int, "iterations between beta/eta/gamma updates"),
    "learn_params": (_bool, "update beta, eta and gamma"),
    "neighbor_backcoupling": (_bool, "include neighbor terms in the mu gradient"),
    "indicator_likelihood": (str, "bernoulli or exp"),
    "langevin_noise": (_bool, "inject Langevin noise"),
    "init_method": (str, "spectral or random"),
    "init_scale": (float, "initial membership scale"),
    "init_jitter": (float, "initial per-step jitter"),
    "variance_floor": (float, "floor on eta^2 and gamma^2"),
    "workers": (int, "indicator-phase threads"),
}
_PARAM_KEYS = {
    "rho": (float, "link sparsity"),
    "laplace_scale": (float, "Laplace prior scale b"),
    "iota": (float, "initial affinity prior mean"),
    "sigma2": (float, "initial affinity prior variance"),
    "influence_snapshot": (str, "current or previous"),
    "eta0": (float, "initial transition std-dev"),
    "gamma0": (float, "initial affinity std-dev"),
}
_OTHER_KEYS = {
    "seed": (int, 0, "random seed (fallback: DYNET_SEED)"),
    "out": (str, ".", "output directory"),
    "input": (str, None, "edge list (default: <out>/network.tsv)"),
    "posterior": (str, None, "posterior summary (default: <out>/posterior.json)"),
    "truth": (str, None, "ground truth (default: <out>/truth.json if present)"),
    "resume": (str, None, "checkpoint to resume inference from"),
    "checkpoint_every": (int, 0, "also write checkpoint.json every n iterations (0: end only)"),
    "variant": (int, 1, "synthetic variant 1, 2 or 3"),
    "num_nodes": (int, None, "N (default: edge-list header or data)"),
    "num_steps": (int, None, "T (default: edge-list header or data)"),
    "kappa": (float, DEFAULT_KAPPA, "global threshold multiple of the median distance"),
    "local_floor": (float, DEFAULT_LOCAL_FLOOR, "minimum local score to flag a node"),
}
_ALIASES = {"sparse": "sparse_mode", "minibatch": "minibatch_fraction", "iterations": "num_iterations"}

_sampler_defaults = asdict(SgldConfig())
_param_defaults = {"rho": 0.01, "laplace_scale": 0.1, "iota": 0.0, "sigma2": 4.0,
                   "influence_snapshot": "current", "eta0": 0.1, "gamma0": 0.1}


def _key_table() -> dict[str, tuple]:
    table = {}
    for k, (conv, text) in _SAMPLER_KEYS.items():
        table[k] = (conv, _sampler_defaults[k], text)
    for k, (conv, text) in _PARAM_KEYS.items():
        table[k] = (conv, _param_defaults[k], text)
    table.update(_OTHER_KEYS)
    return table


KEYS = _key_table()


def _canonical(name: str) -> str:
    name = name.strip().replace("-", "_")
    return _ALIASES.get(name, name)


def read_config_file(path: str | os.PathLike) -> dict[str, str]:
    """Parse a sectionless ``key = value`` file (``#`` comments allowed)."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=", ":"),
                                       comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_string("[run]\n" + fh.read(), source=str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    out = {}
    for key, value in parser["run"].items():
        name = _canonical(key)
        if name not in KEYS:
            raise ConfigError(f"config file {path}: unknown key {key!r}")
        out[name] = value
    return out


def resolve_settings(cli: dict[str, str], config_path: str | None,
                     environ: os._Environ | dict | None = None) -> dict:
    """Merge CLI > config file > (DYNET_SEED for the seed) > defaults, converting types."""
    environ = os.environ if environ is None else environ
    raw = read_config_file(config_path) if config_path else {}
    raw.update(cli)
    if "seed" not in raw and environ.get("DYNET_SEED", "").strip():
        raw["seed"] = environ["DYNET_SEED"].strip()
    settings = {k: default for k, (_, default, _) in KEYS.items()}
    explicit = set()
    for name, text in raw.items():
        conv = KEYS[name][0]
        try:
            settings[name] = conv(text)
        except ValueError:
            raise ConfigError(f"bad value for {name}: {text!r}") from None
        explicit.add(name)
    settings["_explicit"] = explicit
    return settings


def sampler_config(settings: dict) -> SgldConfig:
    kw = {k: settings[k] for k in _SAMPLER_KEYS}
    kw["seed"] = settings["seed"]
    try:
        return SgldConfig(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def model_params(settings: dict, N: int, T: int) -> ModelParams:
    try:
        params = ModelParams.default(
            N, T, settings["K"],
            eta=np.full(settings["K"], settings["eta0"]), gamma=settings["gamma0"],
            rho=settings["rho"], laplace_scale=settings["laplace_scale"], iota=settings["iota"],
            sigma2=settings["sigma2"], influence_snapshot=settings["influence_snapshot"],
        )
        params.validate(strict=True)
        return params
    except (DomainError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# File helpers
# ---------------------------------------------------------------------------


def _out_dir(settings: dict) -> Path:
    out = Path(settings["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    return out


def _write_text(path: Path, text: str):
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from None


def _write_csv(path: Path, header: list[str], rows):
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\r\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from None


def _fmt(x: float) -> str:
    return repr(float(x))


def _header_dims(path: Path) -> dict[str, int]:
    """``num_nodes=`` / ``num_steps=`` declarations in leading comment lines."""
    dims = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                if line.strip():
                    break
                continue
            body = line[1:].strip()
            key, sep, value = body.partition("=")
            if sep and key.strip() in ("num_nodes", "num_steps"):
                try:
                    dims[key.strip()] = int(value)
                except ValueError:
                    pass
    return dims


def _data_extent(path: Path) -> tuple[int, int]:
    max_t = max_node = -1
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            f = line.split()
            if len(f) == 3 and not line.lstrip().startswith("#"):
                try:
                    t, u, v = (int(x) for x in f)
                except ValueError:
                    continue
                max_t, max_node = max(max_t, t), max(max_node, u, v)
    return max_node + 1, max_t + 1


def load_network(settings: dict, out: Path) -> DynamicNetwork:
    path = Path(settings["input"]) if settings["input"] else out / "network.tsv"
    if not path.is_file():
        raise DataError(f"input network {path} not found")
    try:
        header = _header_dims(path)
        n_data, t_data = _data_extent(path)
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    N = settings["num_nodes"] or header.get("num_nodes") or n_data
    T = settings["num_steps"] or header.get("num_steps") or t_data
    if n_data > N or t_data > T:
        raise ConfigError(f"configured N={N}, T={T} but {path} references node {n_data - 1} "
                          f"and time {t_data - 1}")
    if N < 2 or T < 1:
        raise ConfigError(f"need N >= 2 and T >= 1, got N={N}, T={T}")
    try:
        return load_snapshots(path, N, T)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def load_posterior(settings: dict, out: Path) -> PosteriorSummary:
    path = Path(settings["posterior"]) if settings["posterior"] else out / "posterior.json"
    if not path.is_file():
        raise ConfigError(f"posterior {path} not found; run 'infer' first or pass --posterior")
    try:
        return PosteriorSummary.from_json(path.read_text(encoding="utf-8"))
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read posterior {path}: {exc}") from None


def load_truth(settings: dict, out: Path) -> GroundTruth | None:
    if settings["truth"]:
        path = Path(settings["truth"])
        if not path.is_file():
            raise ConfigError(f"truth file {path} not found")
    else:
        path = out / "truth.json"
        if not path.is_file():
            return None
    try:
        return GroundTruth.from_json(path.read_text(encoding="utf-8"))
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read truth {path}: {exc}") from None


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate(settings: dict) -> list[Path]:
    variant = settings["variant"]
    if variant not in (1, 2, 3):
        raise ConfigError(f"variant must be 1, 2 or 3, got {variant}")
    out = _out_dir(settings)
    rng = np.random.default_rng(settings["seed"])
    net, truth = generate_synthetic(variant, rng)
    header = (f"synthetic variant {variant}, seed {settings['seed']}\n"
              f"num_nodes={net.num_nodes}\nnum_steps={net.num_steps}\n"
              "format: t u v (0-based)")
    try:
        write_snapshots(net, out / "network.tsv", header=header)
    except OSError as exc:
        raise DataError(f"cannot write {out / 'network.tsv'}: {exc}") from None
    _write_text(out / "truth.json", truth.to_json())
    return [out / "network.tsv", out / "truth.json"]


def _write_checkpoint(sampler: SgldSampler, out: Path):
    _write_text(out / "checkpoint.json", json.dumps(sampler.checkpoint(), sort_keys=True))


def cmd_infer(settings: dict) -> list[Path]:
    out = _out_dir(settings)
    net = load_network(settings, out)
    T, N = net.num_steps, net.num_nodes
    if settings["resume"]:
        path = Path(settings["resume"])
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read checkpoint {path}: {exc}") from None
        except ValueError as exc:
            raise DataError(f"checkpoint {path} is not valid JSON: {exc}") from None
        # the run's identity comes from the checkpoint; only its length and threading may change
        overrides = {k: settings[k] for k in ("num_iterations", "workers") if k in settings["_explicit"]}
        try:
            sampler = SgldSampler.from_checkpoint(net, doc, **overrides)
        except (DomainError, ValueError) as exc:
            raise ConfigError(f"checkpoint {path} does not fit the network: {exc}") from None
    else:
        cfg = sampler_config(settings)
        if cfg.K >= N:
            raise ConfigError(f"K={cfg.K} must be smaller than N={N}")
        sampler = SgldSampler(net, cfg, model_params(settings, N, T))
    every = settings["checkpoint_every"]
    try:
        while sampler.iteration < sampler.cfg.num_iterations:
            stop = sampler.cfg.num_iterations
            if every > 0:
                stop = min(stop, (sampler.iteration // every + 1) * every)
            sampler.run(stop)
            if every > 0 and sampler.iteration < sampler.cfg.num_iterations:
                _write_checkpoint(sampler, out)
    finally:
        sampler.close()
    summary = sampler.summary()
    _write_text(out / "posterior.json", summary.to_json())
    _write_checkpoint(sampler, out)
    _write_csv(out / "loglik_trace.csv", ["iteration", "loglik", "dyads_touched"],
               ([i, _fmt(ll), n] for i, (ll, n) in enumerate(zip(sampler.loglik_trace, sampler.dyads_touched))))
    return [out / "posterior.json", out / "checkpoint.json", out / "loglik_trace.csv"]


def cmd_detect(settings: dict) -> list[Path]:
    out = _out_dir(settings)
    summary = load_posterior(settings, out)
    if not settings["kappa"] > 0:
        raise ConfigError("kappa must be positive")
    rep = change_report(summary, settings["kappa"], settings["local_floor"])
    _write_text(out / "change_report.json", rep.to_json())
    _write_csv(out / "global_distances.csv", ["t", "distance", "flagged"],
               ([t + 1, _fmt(d), int(t + 1 in rep.global_change_points)]
                for t, d in enumerate(rep.global_distances)))
    flagged = {(t, p) for t, nodes in rep.flagged_nodes.items() for p in nodes}
    rows = []
    for r in range(rep.local_scores.shape[0]):
        for p in range(rep.local_scores.shape[1]):
            rows.append([r + 1, p, _fmt(rep.local_scores[r, p]), _fmt(rep.beta_scores[r, p]),
                         int((r + 1, p) in flagged)])
    _write_csv(out / "local_scores.csv", ["t", "node", "score", "beta", "flagged"], rows)
    return [out / "change_report.json", out / "global_distances.csv", out / "local_scores.csv"]


def cmd_report(settings: dict) -> list[Path]:
    out = _out_dir(settings)
    summary = load_posterior(settings, out)
    T, N, K = summary.mean_pi.shape
    if settings["num_nodes"] is None:
        settings = dict(settings, num_nodes=N)
    if settings["num_steps"] is None:
        settings = dict(settings, num_steps=T)
    net = load_network(settings, out)
    if (net.num_steps, net.num_nodes) != (T, N):
        raise ConfigError(f"posterior covers T={T}, N={N} but the network has "
                          f"T={net.num_steps}, N={net.num_nodes}")
    truth = load_truth(settings, out)
    pi, B = summary.mean_pi, summary.mean_B
    written = []
    if truth is not None:
        if truth.true_pi.shape != pi.shape:
            raise ConfigError(f"truth has shape {truth.true_pi.shape}, posterior {pi.shape}")
        alignment = align_labels(pi, truth.true_pi)
        pi, B = alignment.apply_pi(pi), alignment.apply_B(B)
        doc = {
            "alignment_cost": alignment.cost,
            "permutation": list(alignment.permutation),
            "recovery_error": recovery_error(summary.mean_pi, truth.true_pi, alignment),
            "affinity_error": float(np.abs(B - truth.true_B).mean()),
            "convention": "permutation[k] is the learned community matched to true community k",
        }
        _write_text(out / "recovery.json", json.dumps(doc, sort_keys=True, indent=1))
        written.append(out / "recovery.json")

    logp = dyad_log_predictive(net, summary)
    per_t_params = param_count(N, K, 1)
    rows = []
    for t in range(T):
        ll = float(logp[t].sum())
        rows.append([t, _fmt(np.exp(-logp[t].mean())), _fmt(aic(ll, per_t_params)), _fmt(ll)])
    _write_csv(out / "metrics.csv", ["t", "perplexity", "aic", "loglik"], rows)
    written.append(out / "metrics.csv")
    for t in range(T):
        _write_csv(out / f"affinity_t{t}.csv", ["community"] + [str(k) for k in range(K)],
                   ([k] + [_fmt(x) for x in B[t, k]] for k in range(K)))
        _write_csv(out / f"membership_t{t}.csv", ["node"] + [str(k) for k in range(K)],
                   ([p] + [_fmt(x) for x in pi[t, p]] for p in range(N)))
        written += [out / f"affinity_t{t}.csv", out / f"membership_t{t}.csv"]
    return written


COMMANDS = {"generate": cmd_generate, "infer": cmd_infer, "detect": cmd_detect, "report": cmd_report}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("-v", "--verbose", action="store_true")
    for name, (_, default, text) in KEYS.items():
        flags = [f"--{name.replace('_', '-')}"]
        flags += [f"--{a}" for a, target in _ALIASES.items() if target == name]
        shown = "" if default is None else f" [default: {default}]"
        common.add_argument(*flags, dest=name, default=argparse.SUPPRESS, metavar="VALUE",
                            help=text + shown)
    parser = argparse.ArgumentParser(prog="scmmsb", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic network and its ground truth")
    sub.add_parser("infer", parents=[common], help="run the SGLD sampler on an edge list")
    sub.add_parser("detect", parents=[common], help="extract global and local change points")
    sub.add_parser("report", parents=[common], help="write per-step metrics and plot-ready tables")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config", None)
    verbose = args.pop("verbose", False)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve_settings({k: v for k, v in args.items()}, config_path)
        for path in COMMANDS[command](settings):
            log.info("wrote %s", path)
    except ConfigError as exc:
        print(f"scmmsb {command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, MalformedInputError) as exc:
        print(f"scmmsb {command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"scmmsb {command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
