"""Command-line experiment runner.

Subcommands: ``canon``, ``train``, ``equivariance-check``, ``gradcheck``.
Exit codes: 0 ok, 1 verification failed, 2 config/parse error,
3 degenerate input, 4 numeric failure.
"""

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .canon import DEFAULT_MAX_ITER, DEFAULT_TOL, rz_canonicalize
from .errors import ConfigError, ConvergenceError, DegenerateInputError, NumericError, ShapeError
from .gauge import check_trajectory_equivariance, sample_gauge, solve_gauge_constraints
from .graph import finite_diff_grad, loss_and_grad, max_relative_error
from .models import build_network, save_network
from .optim import Optimizer, OptimizerConfig, batch_schedule, train_step
from .tasks import make_task
from .tensor import format_matrix, read_matrix

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DEGENERATE, EXIT_NUMERIC = 0, 1, 2, 3, 4
EQUIV_THRESHOLD = 1e-6
GRADCHECK_THRESHOLD = 1e-5
GRADCHECK_POINTS = 10
GRADCHECK_H = 1e-5
N_SAMPLES = 256


@dataclass
class ExperimentConfig:
    seed: int
    task: str
    architecture: dict
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    steps: int = 100
    batch_size: int = 32
    log_range: float = 0.0
    out_dir: str = "runs"

    def __post_init__(self):
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        if not isinstance(self.steps, int) or self.steps < 0:
            raise ConfigError("steps must be a nonnegative integer")
        if not isinstance(self.batch_size, int) or self.batch_size <= 0:
            raise ConfigError("batch_size must be a positive integer")
        if not self.log_range >= 0:
            raise ConfigError("log_range must be nonnegative")

    @classmethod
    def from_dict(cls, d):
        known = {"seed", "task", "architecture", "optimizer", "steps", "batch_size",
                 "log_range", "out_dir"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = {"seed", "task", "architecture"} - set(d)
        if missing:
            raise ConfigError(f"missing config keys: {sorted(missing)}")
        d = dict(d)
        d["optimizer"] = OptimizerConfig.from_dict(d.get("optimizer", {}))
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        try:
            return cls.from_dict(raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self):
        return asdict(self)

    def digest(self):
        """SHA-256 of the experiment definition (the output directory excluded)."""
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def seeds(self):
        """Independent integer seeds for init, data, batches and gauge."""
        init, data, batches, gauge = np.random.SeedSequence(self.seed).generate_state(4)
        return int(init), int(data), int(batches), int(gauge)


def setup(cfg):
    """Build ``(net, x, target)`` for an experiment config."""
    init_seed, data_seed, _, _ = cfg.seeds()
    arch = cfg.architecture
    if "input" not in arch or "output" not in arch:
        raise ConfigError("architecture needs 'input' and 'output'")
    x, y, output = make_task(cfg.task, arch["input"], int(arch["output"]), N_SAMPLES, data_seed)
    net = build_network(arch, init_seed, output=output)
    return net, x, y


def _thread_cap():
    try:
        return max(1, int(os.environ.get("UC_GRAD_THREADS", "1")))
    except ValueError:
        return 1


def _csv_header(cfg):
    return f"# config_sha256={cfg.digest()}\n"


# -- commands ---------------------------------------------------------------

def cmd_canon(path, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, out=None, stream=None):
    try:
        w = read_matrix(path)
    except (OSError, ShapeError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        dec = rz_canonicalize(w, tol=tol, max_iter=max_iter)
    except DegenerateInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    text = "\n".join([
        format_matrix(dec.d[None, :]),
        format_matrix(dec.wp),
        format_matrix(dec.e[None, :]),
        f"residual={float(dec.residual)!r} iters={dec.iters}\n",
    ])
    (stream or sys.stdout).write(text)
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "canon.txt"), "w") as fh:
            fh.write(text)
    return EXIT_OK


def run_train(cfg):
    """Train per ``cfg``; write ``train.csv`` and the final parameters."""
    net, x, y = setup(cfg)
    _, _, batch_seed, _ = cfg.seeds()
    os.makedirs(cfg.out_dir, exist_ok=True)
    opt = Optimizer(cfg.optimizer)
    rows = []
    status = EXIT_OK
    for t, idx in enumerate(batch_schedule(x.shape[-1], cfg.batch_size, cfg.steps, batch_seed)):
        try:
            with np.errstate(over="raise", invalid="raise"):
                loss, gnorm = train_step(net, opt, x[..., idx], y[..., idx])
        except (NumericError, FloatingPointError, ArithmeticError):
            status = EXIT_NUMERIC
            break
        if not (np.isfinite(loss) and np.isfinite(gnorm)):
            status = EXIT_NUMERIC
            break
        rows.append(f"{t},{float(loss)!r},{float(gnorm)!r}\n")
    with open(os.path.join(cfg.out_dir, "train.csv"), "w") as fh:
        fh.write(_csv_header(cfg))
        fh.write("step,loss,grad_norm\n")
        fh.writelines(rows)
    save_network(net, os.path.join(cfg.out_dir, "final"))
    return status, net


def run_equivariance(cfg):
    net, x, y = setup(cfg)
    _, _, batch_seed, gauge_seed = cfg.seeds()
    s = sample_gauge(solve_gauge_constraints(net), gauge_seed, cfg.log_range)
    report = check_trajectory_equivariance(net, s, (x, y), cfg.optimizer, cfg.steps,
                                           cfg.batch_size, batch_seed, gauge_seed)
    os.makedirs(cfg.out_dir, exist_ok=True)
    report.to_csv(os.path.join(cfg.out_dir, "equiv.csv"), cfg.digest())
    return report


def _gradcheck_point(cfg, seed, corrupt):
    rng = np.random.default_rng(seed)
    net = build_network(cfg.architecture, seed, output="mse" if cfg.task != "two_moons" else "softmax_xent")
    # nonzero biases so their gradients are exercised
    for node in net.nodes:
        if "b" in node.params:
            node.params["b"] = rng.normal(0.0, 0.1, size=node.params["b"].shape)
    x = rng.normal(size=net.input.shape + (4,))
    if net.terminal.loss == "softmax_xent":
        target = rng.integers(0, net.shapes[net.terminal.name][0], size=4)
    else:
        target = rng.normal(size=net.shapes[net.terminal.name] + (4,))
    _, grads, _ = loss_and_grad(net, x, target)
    if corrupt:
        key = sorted(grads.params)[0]
        grads.params[key] = grads.params[key] * 1.01
    fd = finite_diff_grad(net, x, target, GRADCHECK_H)
    return max_relative_error(grads, fd.grads), fd.flagged


def run_gradcheck(cfg, corrupt=False):
    """Return a list of ``(seed, max_rel_err, flagged)`` for the evaluation points."""
    seeds = [int(s) for s in np.random.SeedSequence(cfg.seed).generate_state(GRADCHECK_POINTS)]
    with ThreadPoolExecutor(max_workers=_thread_cap()) as pool:
        results = list(pool.map(lambda s: _gradcheck_point(cfg, s, corrupt), seeds))
    return [(s, err, flagged) for s, (err, flagged) in zip(seeds, results)]


def _load(args):
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def cmd_train(args):
    status, _ = run_train(_load(args))
    return status


def cmd_equivariance(args):
    cfg = _load(args)
    report = run_equivariance(cfg)
    kind = cfg.optimizer.kind
    print(f"optimizer={kind} max_weight_dev={report.max_weight_dev:.3e} "
          f"max_loss_gap={report.max_loss_gap:.3e} diverged={report.diverged}")
    if cfg.optimizer.is_uc:
        ok = report.max_weight_dev <= EQUIV_THRESHOLD and not report.diverged
        print("PASS" if ok else "FAIL")
        return EXIT_OK if ok else EXIT_FAIL
    print(f"baseline (equivariance not expected): deviation {report.max_weight_dev:.3e} "
          f"{'>' if report.max_weight_dev > EQUIV_THRESHOLD else '<='} {EQUIV_THRESHOLD:g}")
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = _load(args)
    rows = run_gradcheck(cfg, corrupt=args.corrupt_gradient)
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "gradcheck.csv"), "w") as fh:
        fh.write(_csv_header(cfg))
        fh.write("point,seed,max_rel_err,flagged\n")
        for i, (s, err, flagged) in enumerate(rows):
            fh.write(f"{i},{s},{float(err)!r},{int(flagged)}\n")
    used = [err for _, err, flagged in rows if not flagged]
    worst = max(used) if used else float("nan")
    print(f"max_rel_err={worst:.3e} points={len(used)}/{len(rows)}")
    ok = bool(used) and worst <= GRADCHECK_THRESHOLD
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


def build_parser():
    parser = argparse.ArgumentParser(prog="ucgsd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("canon", help="canonical diagonal decomposition of a matrix file")
    p.add_argument("input")
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.add_argument("--max-iter", type=int, default=DEFAULT_MAX_ITER)
    p.add_argument("--out")

    for name, fn, help_ in [
        ("train", cmd_train, "train a network from a JSON config"),
        ("equivariance-check", cmd_equivariance, "paired-trajectory gauge equivariance check"),
        ("gradcheck", cmd_gradcheck, "backprop vs central finite differences"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.set_defaults(func=fn)
        if name == "gradcheck":
            p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.command == "canon":
        return cmd_canon(args.input, args.tol, args.max_iter, args.out)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DegenerateInputError as exc:
        print(f"degenerate input: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (NumericError, ConvergenceError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ShapeError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
