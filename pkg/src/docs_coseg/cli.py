"""Command-line entry point: ``docs-coseg <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import correlation, dataset, group, network, plotting, rasters
from .config import load_config
from .gradcheck import finite_diff_gradcheck
from .metrics import evaluate_manifest, jaccard, precision
from .train import NumericError, StepRecord, pretrain_encoder, train

log = logging.getLogger("docs_coseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4


class DataError(Exception):
    pass


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    return int(os.environ.get("DOCS_THREADS", "1"))


def _thread_limit(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=n)


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    out = Path(args.out)
    if dataset.is_nonempty_dir(out):
        if not args.force:
            raise DataError(f"{out} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    pairs = args.pairs
    others = max(1, pairs // 10)
    try:
        manifests, images = dataset.make_splits(args.images, args.seed, max_pairs=(pairs, others, others))
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    dataset.write_dataset(out, manifests, images)
    for m in manifests:
        print(f"{m.split}: {len(m.image_ids)} images, {len(m.records)} pairs")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _samples(man: dataset.Manifest, images) -> list[dataset.PairSample]:
    return [dataset.PairSample(images[r.id_a], images[r.id_b], r.mask_a, r.mask_b) for r in man.records]


def _load_samples(data, split):
    try:
        man, images = dataset.load_split(data, split)
    except FileNotFoundError as exc:
        raise DataError(f"cannot read split {split!r} from {data}: {exc}") from exc
    return man, _samples(man, images)


def _pretrain(params, cfg, run, man) -> None:
    ids = sorted(man.image_ids or {r.id_a for r in man.records} | {r.id_b for r in man.records})
    root = Path(run.data)
    try:
        images = np.stack([dataset.load_image(root / "images" / f"{i}.png") for i in ids])
        labels = np.stack([dataset.load_labels(root / "labels" / f"{i}.png") for i in ids])
    except FileNotFoundError as exc:
        raise DataError(f"encoder pretraining needs class labels: {exc}") from exc
    t0 = time.time()
    losses = pretrain_encoder(
        params, cfg, images, labels, len(dataset.CLASSES) + 1, run.pretrain_iterations,
        batch=run.pretrain_batch, lr=run.pretrain_lr, weight_decay=run.weight_decay, seed=run.seed,
    )
    log.info("pretrained encoder for %d iterations, final loss %.4f (%.0fs)", len(losses), losses[-1], time.time() - t0)


def cmd_train(args) -> int:
    overrides = {k: getattr(args, k) for k in ("iterations", "lr", "fusion", "seed", "batch_pairs", "eval_every", "checkpoint_every", "topology", "weight_decay")}
    overrides["data"] = args.data
    overrides["out"] = args.out
    try:
        run = load_config(args.config, overrides)
        cfg = run.network_config()
    except (OSError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}") from exc
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    run.save(out / "config.cfg")
    man, samples = _load_samples(run.data, "train")
    if not samples:
        raise DataError(f"{run.data}: training split has no pairs")
    val = _load_samples(run.data, "val")[1] if run.eval_every else None
    params = network.init_params(cfg, run.seed)
    if run.pretrain_iterations:
        with _thread_limit(_threads(args)):
            _pretrain(params, cfg, run, man)
    ckpt = out / "checkpoint.docs"
    loss_path = out / "loss.tsv"
    history: list[StepRecord] = []
    t0 = time.time()

    def on_step(rec: StepRecord, p):
        history.append(rec)
        if rec.iteration % run.checkpoint_every == 0:
            network.save_checkpoint(ckpt, p, cfg)
        if rec.iteration % 100 == 0:
            log.info("iter %d loss %.4f (%.0fs)", rec.iteration, rec.loss, time.time() - t0)

    def write_log():
        rows = ["iteration\tloss\tval_jaccard"]
        for h in history:
            rows.append(f"{h.iteration}\t{h.loss:.6f}\t{'' if h.val_jaccard is None else f'{h.val_jaccard:.6f}'}")
        loss_path.write_text("\n".join(rows) + "\n")

    with _thread_limit(_threads(args)):
        try:
            train(
                params, cfg, samples, run.iterations,
                batch_pairs=run.batch_pairs, lr=run.lr, beta1=run.beta1, beta2=run.beta2, eps=run.eps,
                weight_decay=run.weight_decay, seed=run.seed, augment=run.augment,
                val_samples=val, eval_every=run.eval_every, on_step=on_step,
            )
        except NumericError as exc:
            write_log()
            print(f"error: {exc}; last good checkpoint kept at {ckpt}", file=sys.stderr)
            return EXIT_NUMERIC
    network.save_checkpoint(ckpt, params, cfg)
    write_log()
    if history:
        plotting.plot_loss(history, out / "loss.png")
    print(f"trained {run.iterations} iterations; checkpoint {ckpt}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer


def _load_ckpt(path):
    try:
        return network.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    except network.CheckpointError as exc:
        raise DataError(str(exc)) from exc


def _fit_size(image: np.ndarray, size: int, name: str) -> np.ndarray:
    from PIL import Image

    if image.shape[1:] == (size, size):
        return image
    log.warning("resizing %s from %dx%d to %dx%d (bilinear)", name, image.shape[1], image.shape[2], size, size)
    chans = [np.asarray(Image.fromarray(c).resize((size, size), Image.BILINEAR)) for c in image]
    return np.stack(chans).astype(np.float32)


def _restore_size(prob: np.ndarray, shape) -> np.ndarray:
    from PIL import Image

    if prob.shape == tuple(shape):
        return prob
    return np.asarray(Image.fromarray(prob.astype(np.float32)).resize((shape[1], shape[0]), Image.BILINEAR))


def infer_pair(params, cfg, image_a: np.ndarray, image_b: np.ndarray, names=("A", "B")):
    """Foreground probability maps at each input's own resolution."""
    a = _fit_size(image_a, cfg.input_size, names[0])
    b = _fit_size(image_b, cfg.input_size, names[1])
    with params.frozen():
        pA, pB = network.forward_pair(a[None], b[None], params, cfg)
    return _restore_size(pA.data[0, 1], image_a.shape[1:]), _restore_size(pB.data[0, 1], image_b.shape[1:])


def cmd_infer(args) -> int:
    params, cfg = _load_ckpt(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with _thread_limit(_threads(args)):
        if args.data:
            man, images = dataset.load_split(args.data, args.split)
            for rec in man.records:
                pa, pb = infer_pair(params, cfg, images[rec.id_a], images[rec.id_b], (rec.id_a, rec.id_b))
                dataset.save_mask(out / f"{rec.key}_A.png", pa > args.sigma)
                dataset.save_mask(out / f"{rec.key}_B.png", pb > args.sigma)
            print(f"wrote {2 * len(man.records)} masks to {out}")
            return EXIT_OK
        if len(args.images) != 2:
            raise DataError("infer needs exactly two images (or --data for a whole split)")
        try:
            ia, ib = (dataset.load_image(p) for p in args.images)
        except (FileNotFoundError, OSError) as exc:
            raise DataError(f"cannot read image: {exc}") from exc
        pa, pb = infer_pair(params, cfg, ia, ib)
    for side, prob in (("A", pa), ("B", pb)):
        dataset.save_mask(out / f"mask{side}.png", prob > args.sigma)
        if args.dump_prob:
            rasters.write_pmap(out / f"prob{side}.pmap", prob)
            plotting.save_heatmap(prob, out / f"prob{side}.png")
    print(f"wrote masks to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# group


def _parse_ks(text: str) -> list:
    ks = []
    for tok in text.split(","):
        tok = tok.strip()
        ks.append("all" if tok == "all" else int(tok))
    return ks


def cmd_group(args) -> int:
    params, cfg = _load_ckpt(args.ckpt)
    paths = sorted(p for p in Path(args.dir).glob("*.png"))
    if len(paths) < 2:
        raise DataError(f"{args.dir}: need at least 2 PNG images, found {len(paths)}")
    images = [_fit_size(dataset.load_image(p), cfg.input_size, p.name) for p in paths]
    try:
        ks = _parse_ks(args.k)
    except ValueError as exc:
        raise DataError(f"bad --k value {args.k!r}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sweep = []
    for k in ks:
        kdir = out if len(ks) == 1 else out / f"k_{k}"
        kdir.mkdir(parents=True, exist_ok=True)
        try:
            with _thread_limit(_threads(args)):
                res = group.run_group(images, params, cfg, k, args.sigma, args.seed)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        lines = [f"{n}\t{m}\t{paths[n].name}\t{paths[m].name}" for n, m in res.plan]
        (kdir / "pairs.log").write_text("\n".join(lines) + "\n")
        for p, mask in zip(paths, res.masks):
            dataset.save_mask(kdir / p.name, mask)
        print(f"K={k}: {len(res.plan)} forward passes")
        if args.gt:
            scores = [(precision(m, dataset.load_mask(Path(args.gt) / p.name)), jaccard(m, dataset.load_mask(Path(args.gt) / p.name))) for p, m in zip(paths, res.masks)]
            mp, mj = np.mean(scores, axis=0)
            sweep.append((k, float(mp), float(mj)))
            print(f"K={k}: P={mp:.2f} J={mj:.3f}")
    if sweep:
        rows = ["k\tP\tJ"] + [f"{k}\t{p:.4f}\t{j:.6f}" for k, p, j in sweep]
        (out / "k_sweep.tsv").write_text("\n".join(rows) + "\n")
        plotting.plot_k_sweep(sweep, out / "k_sweep.png")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    try:
        man = dataset.read_manifest(Path(args.data) / f"{args.split}.tsv")
        report = evaluate_manifest(args.pred, man, args.data)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    out = Path(args.out) if args.out else Path(args.pred)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_table())
    (out / "report.tsv").write_text(report.to_tsv())
    if report.items:
        plotting.plot_metric_hist(report, out / "report.png")
    sys.stdout.write(report.to_table())
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def _gradcheck_case(op: str, seed: int) -> float:
    from . import ops

    rng = np.random.default_rng(seed)
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    if op == "conv":
        return finite_diff_gradcheck(lambda x, w, b: ops.conv2d(x, w, b, 1, 1), [r(1, 2, 5, 5), r(3, 2, 3, 3), r(3)], seed=seed)
    if op == "deconv":
        return finite_diff_gradcheck(lambda x, w, b: ops.transposed_conv2d(x, w, b, 2, 1), [r(1, 2, 3, 3), r(2, 3, 4, 4), r(3)], seed=seed)
    if op == "corr":
        return finite_diff_gradcheck(lambda a, b: correlation.mutual_correlate(a, b, 5), [r(1, 3, 4, 4), r(1, 3, 4, 4)], seed=seed)
    if op == "e2e":
        return e2e_gradcheck(seed)
    raise KeyError(op)


def e2e_gradcheck(seed: int = 0, fusion: str = "correlation", eps: float = 1e-6) -> float:
    """Finite-difference check of the total pair loss w.r.t. every weight of a tiny net."""
    cfg = network.NetworkConfig.tiny(fusion=fusion)
    store = network.init_params(cfg, seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    # zero biases put every all-zero input patch exactly on a ReLU kink, where
    # central differences are meaningless; check at a generic point instead
    for name, t in store.items():
        if name.endswith(".b"):
            t.data[...] = 0.1 * rng.standard_normal(t.data.shape)
    iA = rng.random((1, 3, cfg.input_size, cfg.input_size))
    iB = rng.random((1, 3, cfg.input_size, cfg.input_size))
    mA = (rng.random((1, cfg.input_size, cfg.input_size)) > 0.5).astype(np.int64)
    mB = (rng.random((1, cfg.input_size, cfg.input_size)) > 0.5).astype(np.int64)
    names = list(store)

    def loss(*ws):
        from .tensor import ParamStore

        ps = ParamStore()
        for n, w in zip(names, ws):
            ps.params[n] = w
        return network.pair_loss(iA, iB, mA, mB, ps, cfg)

    return finite_diff_gradcheck(loss, [store[n].data for n in names], eps=eps, seed=seed)


def cmd_gradcheck(args) -> int:
    err = _gradcheck_case(args.op, args.seed)
    ok = err < GRADCHECK_TOL
    print(f"{args.op}: max relative error {err:.3e} ({'pass' if ok else 'FAIL'}, tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# bench


def bench_correlation(size: int, channels: int, impls=("naive", "opt"), runs: int = 5, seed: int = 0):
    """Median wall-clock seconds per implementation after an agreement check."""
    rng = np.random.default_rng(seed)
    fA = rng.standard_normal((1, channels, size, size)).astype(np.float32)
    fB = rng.standard_normal((1, channels, size, size)).astype(np.float32)
    D = correlation.patch_size_for(size, size)
    fns = {"naive": correlation.correlate_naive, "opt": correlation.correlate_forward}
    ref = correlation.correlate_naive(fA, fB, D)
    opt = correlation.correlate_forward(fA, fB, D)
    scale = max(float(np.abs(ref).max()), 1e-12)
    if float(np.abs(ref - opt).max()) > 1e-5 * scale:
        raise NumericError(f"naive and optimized correlation disagree at size={size} channels={channels}")
    times = {}
    for name in impls:
        samples = []
        for _ in range(runs):
            t = time.perf_counter()
            fns[name](fA, fB, D)
            samples.append(time.perf_counter() - t)
        times[name] = float(np.median(samples))
    return D, times


def cmd_bench(args) -> int:
    impls = ("naive", "opt") if args.impl == "both" else (args.impl,)
    rows = ["size\tchannels\tD\timpl\tmedian_s"]
    with _thread_limit(_threads(args)):
        for size in args.size:
            D, times = bench_correlation(size, args.channels, impls, args.runs)
            for name, t in times.items():
                rows.append(f"{size}\t{args.channels}\t{D}\t{name}\t{t:.6f}")
    text = "\n".join(rows) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="docs-coseg", description="Pairwise and group object co-segmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic pair dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--images", type=int, default=500)
    s.add_argument("--pairs", type=int, default=3000, help="training pairs; val/test get a tenth each")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the pair network")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--iterations", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--batch-pairs", type=int)
    t.add_argument("--fusion", choices=["correlation", "concat"])
    t.add_argument("--topology", choices=["toy", "paper"])
    t.add_argument("--seed", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--threads", type=int)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="co-segment one image pair (or every pair of a split)")
    i.add_argument("--ckpt", required=True)
    i.add_argument("images", nargs="*")
    i.add_argument("--out", required=True)
    i.add_argument("--dump-prob", action="store_true")
    i.add_argument("--sigma", type=float, default=0.5)
    i.add_argument("--data", help="dataset directory; predicts every record of --split")
    i.add_argument("--split", default="test")
    i.add_argument("--threads", type=int)
    i.set_defaults(func=cmd_infer)

    g = sub.add_parser("group", help="co-segment a directory of images")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--dir", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--k", default="all", help="partners per image: an int, 'all', or a comma list for a sweep")
    g.add_argument("--sigma", type=float, default=0.5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--gt", help="directory of ground-truth masks named like the images")
    g.add_argument("--threads", type=int)
    g.set_defaults(func=cmd_group)

    e = sub.add_parser("eval", help="score predicted masks against a split")
    e.add_argument("--pred", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of one op")
    c.add_argument("--op", required=True, choices=["conv", "deconv", "corr", "e2e"])
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="time naive vs optimized correlation")
    b.add_argument("--op", default="corr", choices=["corr"])
    b.add_argument("--size", type=int, nargs="+", default=[16])
    b.add_argument("--channels", type=int, default=1024)
    b.add_argument("--impl", choices=["naive", "opt", "both"], default="both")
    b.add_argument("--runs", type=int, default=5)
    b.add_argument("--out")
    b.add_argument("--threads", type=int)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
