"""Command-line interface: ``acflow {train,eval,impute,sample,gibbs,plot}``.

Every option can also come from a ``key = value`` file passed with
``--config``; explicit flags win.  Each run writes a manifest next to its
outputs with the resolved configuration and the git-style content hash of the
checkpoint it read or wrote.

Exit codes: 0 success, 1 runtime failure (one JSON line on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .data import (
    CsvSchema,
    SyntheticSpec,
    eval_marginal_nll,
    eval_nll,
    eval_nrmse,
    gen_synthetic,
    inject_mcar,
    load_csv,
    read_csv_matrix,
    write_csv,
)
from .errors import ACFlowError, DataError
from .masking import MaskDistribution, as_mask, make_rng, sample_mask
from .model import ACFlow, gibbs_chain, synthetic_architecture, tabular_architecture
from .train import TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("acflow")

STOCHASTIC = ("train", "eval", "impute", "sample", "gibbs")


def git_blob_hash(data):
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def file_hash(path):
    with open(path, "rb") as fh:
        return git_blob_hash(fh.read())


# argument parsing


def _mask_dist(text):
    try:
        return MaskDistribution.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_common(p, out_help="output directory"):
    p.add_argument("--config", metavar="FILE", help="key = value file supplying defaults for any option")
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")


def build_parser():
    parser = argparse.ArgumentParser(prog="acflow", description="Arbitrary-conditioning flow models.")
    parser.add_argument("--version", action="version", version=f"acflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model; writes model.acfw and history.csv")
    p.add_argument("--data", help="training CSV (header row; empty or NA cells are missing)")
    p.add_argument("--synthetic", choices=["gaussian_mixture_grid", "two_moons_like", "checkerboard", "eight_gaussians"])
    p.add_argument("--synthetic-options", default="{}", help="JSON keyword arguments for the generator")
    p.add_argument("--n-samples", type=int, default=100_000, help="synthetic sample count")
    p.add_argument("--data-seed", type=int, default=0, help="seed for synthetic draws, splits and MCAR")
    p.add_argument("--mcar", type=float, default=0.0, help="remove each training cell with this probability")
    p.add_argument("--arch", default="synthetic", help="'synthetic', 'tabular' or a JSON descriptor file")
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--components", type=int, default=40)
    p.add_argument("--rank", type=int, default=None, help="low-rank linear-layer weights")
    p.add_argument("--mode", choices=["conditional", "conditional_missing", "marginal"], default="conditional")
    p.add_argument("--mask-dist", type=_mask_dist, default=MaskDistribution("bernoulli", 0.5))
    p.add_argument("--lambda", dest="lam", type=float, default=1.0, help="best-guess penalty weight")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-decay", type=float, default=1.0)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--seed", type=int, required=True)
    _add_common(p)

    p = sub.add_parser("eval", help="score a checkpoint; writes metrics.csv")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="evaluation CSV; every row is scored")
    p.add_argument("--metric", choices=["nll", "nrmse", "marginal_nll"], default="nll")
    p.add_argument("--n-masks", type=int, default=5)
    p.add_argument("--mask-dist", type=_mask_dist, default=MaskDistribution("bernoulli", 0.5))
    p.add_argument("--n-samples", type=int, default=0, help="also score multiple imputation with this many draws")
    p.add_argument("--standardized", action="store_true", help="report NLL in standardized units")
    p.add_argument("--seed", type=int, required=True)
    _add_common(p)

    p = sub.add_parser("impute", help="fill missing cells; writes draw_NNN.csv and best_guess.csv")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n-samples", type=int, default=1)
    p.add_argument("--best-guess", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--seed", type=int, required=True)
    _add_common(p)

    p = sub.add_parser("sample", help="draw samples; writes samples.csv")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=["joint", "conditional", "marginal"], default="joint")
    p.add_argument("--condition-file", help="CSV of conditioning rows; NA cells are sampled")
    p.add_argument("--query", help="bitmask of dimensions to sample in marginal mode, e.g. 1010")
    p.add_argument("--n", type=int, default=1000, help="draws per conditioning row")
    p.add_argument("--seed", type=int, required=True)
    _add_common(p)

    p = sub.add_parser("gibbs", help="block Gibbs chain; writes chain.csv")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--init-file", required=True, help="CSV of fully observed starting rows")
    p.add_argument("--blocks", default=None, help="comma-separated bitmasks; default one block per dimension")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, required=True)
    _add_common(p)

    p = sub.add_parser("plot", help="SVG scatter or histogram of a samples CSV")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--kind", choices=["scatter2d", "hist"], default="scatter2d")
    p.add_argument("--columns", default=None, help="comma-separated feature columns; default the first two")
    p.add_argument("--bins", type=int, default=64)
    _add_common(p, out_help="output SVG file")
    return parser


def read_config(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            entries.append((key.replace("-", "_"), value, lineno))
    return entries


def _config_tokens(subparser, path):
    actions = {a.dest: a for a in subparser._actions if a.option_strings}
    tokens = []
    for key, value, lineno in read_config(path):
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            subparser.error(f"{path}:{lineno}: unknown config key {key!r}")
        flag = next(s for s in action.option_strings if s.startswith("--"))
        if action.nargs == 0:
            truth = value.lower()
            if truth not in ("true", "false", "yes", "no", "1", "0"):
                subparser.error(f"{path}:{lineno}: {key} expects true or false")
            on = truth in ("true", "yes", "1")
            if isinstance(action, argparse.BooleanOptionalAction):
                tokens.append(flag if on else "--no-" + flag[2:])
            elif on:
                tokens.append(flag)
        else:
            tokens += [flag, value]
    return tokens


def _find_config(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv):
    """Parse ``argv``; config-file entries are spliced in before the explicit flags."""
    parser = build_parser()
    choices = parser._subparsers._group_actions[0].choices
    path = _find_config(argv)
    idx = next((i for i, tok in enumerate(argv) if tok in choices), None)
    if path is not None and idx is not None:
        sub = choices[argv[idx]]
        try:
            tokens = _config_tokens(sub, path)
        except OSError as exc:
            sub.error(f"cannot read config file: {exc}")
        except ValueError as exc:
            sub.error(str(exc))
        argv = argv[: idx + 1] + tokens + argv[idx + 1 :]
    return parser.parse_args(argv)


# output helpers


def _resolved(args):
    out = {}
    for key, value in sorted(vars(args).items()):
        if key in ("config", "verbose"):
            continue
        out[key] = str(value) if isinstance(value, MaskDistribution) else value
    return out


def write_manifest(path, args, checkpoint=None, outputs=()):
    manifest = {
        "tool": f"acflow {__version__}",
        "command": args.command,
        "config": _resolved(args),
        "checkpoint": None,
        "outputs": {},
    }
    if checkpoint is not None:
        manifest["checkpoint"] = {"path": checkpoint, "hash": file_hash(checkpoint)}
    for out in outputs:
        manifest["outputs"][os.path.basename(out)] = file_hash(out)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(v):
    return repr(float(v))


def _load_matrix(path, model, require_observed=True):
    X, M, cols = read_csv_matrix(path, require_observed=require_observed)
    if X.shape[1] != model.d:
        raise DataError(f"{path} has {X.shape[1]} columns, checkpoint expects {model.d}")
    return X, M, cols


def _read_text_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], [r for r in rows[1:] if r]


# commands


def _architecture(args, d):
    if args.arch == "synthetic":
        return synthetic_architecture(d, hidden=args.hidden, components=args.components, rank=args.rank)
    if args.arch == "tabular":
        return tabular_architecture(d, hidden=args.hidden, components=args.components, rank=args.rank)
    with open(args.arch, encoding="utf-8") as fh:
        desc = json.load(fh)
    if int(desc.get("d", d)) != d:
        raise DataError(f"architecture d={desc['d']} does not match data d={d}")
    desc["d"] = d
    return desc


def cmd_train(args):
    if bool(args.data) == bool(args.synthetic):
        raise DataError("give exactly one of --data or --synthetic")
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    if args.synthetic:
        options = json.loads(args.synthetic_options)
        ds, _ = gen_synthetic(SyntheticSpec(args.synthetic, args.n_samples, args.data_seed, options))
    else:
        ds = load_csv(args.data, CsvSchema(seed=args.data_seed))
    if args.mcar > 0:
        ds = inject_mcar(ds, args.mcar, args.data_seed + 2)
    if args.synthetic or args.mcar > 0:
        # the held-out rows are written out so eval/impute can use them
        x_test, m_test = ds.split("test")
        path = os.path.join(args.out, "test.csv")
        write_csv(path, x_test, ds.names, m_test)
        outputs.append(path)
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        lr_decay=args.lr_decay,
        mask_distribution=args.mask_dist,
        lam=args.lam,
        seed=args.seed,
        mode=args.mode,
        patience=args.patience,
    )
    model = ACFlow(_architecture(args, ds.d), seed=args.seed)
    progress = lambda row: log.info("epoch %(epoch)d train %(train_nll).4f valid %(valid_nll).4f", row)
    model, history = train(model, ds, cfg, progress=progress)
    ckpt = os.path.join(args.out, "model.acfw")
    save_checkpoint(model, ckpt)
    hist = os.path.join(args.out, "history.csv")
    history.to_csv(hist)
    write_manifest(os.path.join(args.out, "manifest.json"), args, ckpt, outputs + [hist])


def _eval_dataset(path, model):
    from .data import Dataset

    X, M, cols = _load_matrix(path, model)
    return Dataset(X, M, cols, np.full(len(X), "test"))


def cmd_eval(args):
    model = load_checkpoint(args.ckpt)
    ds = _eval_dataset(args.data, model)
    if args.n_masks < 1:
        raise DataError("--n-masks must be at least 1")
    rows = []
    if args.metric == "nll":
        mean, std, _ = eval_nll(model, ds, args.n_masks, args.mask_dist, args.seed, standardized=args.standardized)
        rows.append(["nll", "model", mean, std])
    elif args.metric == "marginal_nll":
        mean, std, _ = eval_marginal_nll(
            model, ds, args.n_masks, args.mask_dist, args.seed, standardized=args.standardized
        )
        rows.append(["marginal_nll", "model", mean, std])
    else:
        x, m = ds.split("test")
        rng = make_rng(args.seed)
        best, sampled = [], []
        for _ in range(args.n_masks):
            b = sample_mask(args.mask_dist, m, rng)
            u = (m & (1 - b)).astype(bool)
            best.append(eval_nrmse(model.best_guess(x, b, m), x, model.std, u))
            if args.n_samples > 0:
                draws = model.cond_sample(x, b, m, n=args.n_samples, rng=rng)
                sampled.append(eval_nrmse(draws, x, model.std, u))
        spread = lambda v: float(np.std(v)) if len(v) > 1 else 0.0
        rows.append(["nrmse", "best_guess", float(np.mean(best)), spread(best)])
        if sampled:
            rows.append(["nrmse", f"samples_{args.n_samples}", float(np.mean(sampled)), spread(sampled)])
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "metrics.csv")
    _write_rows(
        path,
        ["metric", "estimator", "mean", "std", "n_masks", "rows"],
        [[r[0], r[1], _fmt(r[2]), _fmt(r[3]), args.n_masks, len(ds)] for r in rows],
    )
    write_manifest(os.path.join(args.out, "manifest.json"), args, args.ckpt, [path])


def _write_filled(path, header, text_rows, M, filled):
    """Observed cells are copied as text; imputed cells are written with ``repr``."""
    rows = []
    for r, text in enumerate(text_rows):
        rows.append([text[j] if M[r, j] else _fmt(filled[r, j]) for j in range(len(text))])
    _write_rows(path, header, rows)


def cmd_impute(args):
    model = load_checkpoint(args.ckpt)
    X, M, cols = _load_matrix(args.data, model, require_observed=False)
    header, text_rows = _read_text_rows(args.data)
    if cols != header:
        raise DataError("impute needs a file whose columns are exactly the model features")
    os.makedirs(args.out, exist_ok=True)
    b = M
    m = np.ones_like(M)
    outputs = []
    rng = make_rng(args.seed)
    if args.n_samples > 0:
        draws = model.cond_sample(X, b, m, n=args.n_samples, rng=rng)
        for k, filled in enumerate(draws, start=1):
            path = os.path.join(args.out, f"draw_{k:03d}.csv")
            _write_filled(path, header, text_rows, M, filled)
            outputs.append(path)
    if args.best_guess:
        path = os.path.join(args.out, "best_guess.csv")
        _write_filled(path, header, text_rows, M, model.best_guess(X, b, m))
        outputs.append(path)
    write_manifest(os.path.join(args.out, "manifest.json"), args, args.ckpt, outputs)


def cmd_sample(args):
    model = load_checkpoint(args.ckpt)
    d = model.d
    rng = make_rng(args.seed)
    if args.mode == "joint":
        x = np.zeros((1, d))
        b = np.zeros((1, d), dtype=np.uint8)
        m = None
    elif args.mode == "conditional":
        if not args.condition_file:
            raise DataError("conditional sampling needs --condition-file")
        x, b, _ = _load_matrix(args.condition_file, model, require_observed=False)
        m = None
    else:
        if model.mode != "marginal":
            raise ValueError(f"marginal sampling needs a marginal-trained checkpoint (this one is {model.mode!r})")
        if not args.query:
            raise DataError("marginal sampling needs --query")
        x = np.zeros((1, d))
        b = np.zeros((1, d), dtype=np.uint8)
        m = parse_bits(args.query, d)[None, :]
    draws = model.cond_sample(x, b, m, n=args.n, rng=rng)
    keep = np.ones(d, dtype=bool) if m is None else m[0].astype(bool)
    rows = []
    for r in range(draws.shape[1]):
        for k in range(draws.shape[0]):
            rows.append([r] + [_fmt(v) if ok else "NA" for v, ok in zip(draws[k, r], keep)])
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "samples.csv")
    _write_rows(path, ["row"] + list(model.names), rows)
    write_manifest(os.path.join(args.out, "manifest.json"), args, args.ckpt, [path])


def parse_bits(text, d):
    """``"1010"`` -> mask array of length ``d``."""
    text = text.strip()
    if not text or set(text) - {"0", "1"}:
        raise DataError(f"bitmask {text!r} must be a string of 0s and 1s")
    return as_mask([int(c) for c in text], d)


def parse_blocks(text, d):
    if not text:
        return [np.eye(d, dtype=np.uint8)[j] for j in range(d)]
    return [parse_bits(part, d) for part in text.split(",")]


def cmd_gibbs(args):
    model = load_checkpoint(args.ckpt)
    X, M, _ = _load_matrix(args.init_file, model)
    if not M.all():
        raise DataError("Gibbs initial rows must be fully observed")
    blocks = parse_blocks(args.blocks, model.d)
    chain = gibbs_chain(model, X, blocks, args.steps, make_rng(args.seed))
    rows = []
    for s in range(chain.shape[0]):
        for r in range(chain.shape[1]):
            rows.append([s + 1, r] + [_fmt(v) for v in chain[s, r]])
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "chain.csv")
    _write_rows(path, ["sweep", "row"] + list(model.names), rows)
    write_manifest(os.path.join(args.out, "manifest.json"), args, args.ckpt, [path])


def cmd_plot(args):
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    header, text_rows = _read_text_rows(args.input)
    features = [h for h in header if h not in ("row", "sweep")]
    cols = args.columns.split(",") if args.columns else features[:2]
    need = 2 if args.kind == "scatter2d" else 1
    if len(cols) < need:
        raise DataError(f"{args.kind} needs {need} feature columns")
    try:
        idx = [header.index(c) for c in cols[:need]]
    except ValueError as exc:
        raise DataError(f"column not found: {exc}") from None
    values = np.array([[float(r[j]) if r[j] not in ("", "NA") else np.nan for j in idx] for r in text_rows])
    values = values[np.all(np.isfinite(values), axis=1)]

    matplotlib.rcParams["svg.hashsalt"] = "acflow"
    fig, ax = plt.subplots(figsize=(5, 5))
    if args.kind == "scatter2d":
        ax.scatter(values[:, 0], values[:, 1], s=2, alpha=0.3, linewidths=0)
        ax.set_xlabel(cols[0])
        ax.set_ylabel(cols[1])
    else:
        ax.hist(values[:, 0], bins=args.bins, density=True)
        ax.set_xlabel(cols[0])
        ax.set_ylabel("density")
    fig.tight_layout()
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    fig.savefig(args.out, format="svg", metadata={"Date": None})
    plt.close(fig)
    stem = os.path.splitext(os.path.basename(args.out))[0]
    write_manifest(os.path.join(out_dir, f"{stem}.manifest.json"), args, None, [args.out])


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "impute": cmd_impute,
    "sample": cmd_sample,
    "gibbs": cmd_gibbs,
    "plot": cmd_plot,
}


def _report(exc):
    info = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("row", "column", "layer", "op"):
        if getattr(exc, attr, None) is not None:
            info[attr] = getattr(exc, attr)
    print(json.dumps(info), file=sys.stderr)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except (ACFlowError, OSError, ValueError, KeyError) as exc:
        _report(exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
