"""Command-line experiment runner.

Subcommands:

* ``fedseed run <cfg>``        execute every configured (strategy,
  partition, seed) arm, writing metrics.csv plus checkpoints.
* ``fedseed summarize <csv>``  final-dice table, summary.csv, figures.
* ``fedseed gaps <csv>``       IID-vs-non-IID gap table, gaps.csv, figure.
* ``fedseed teacher <cfg>``    pre-train and cache the frozen teacher.

Exit codes: 0 success, 2 configuration error, 3 teacher training failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

from .config import FEDERATED_INITS, load_config
from .data import (
    SPLIT_TEACHER_EXTRA,
    build_splits,
    generate_uniform_set,
    partition_age_skew,
    partition_iid,
    partition_quantity_skew,
)
from .errors import ConfigError, FedseedError, TeacherTrainingError
from .federation import (
    FederationConfig,
    mean_standalone_history,
    run_centralized,
    run_federated,
    run_standalone,
    write_metrics,
)
from .initlab import (
    DistillConfig,
    frozen_teacher_from_params,
    init_checkpoint_name,
    init_fm_instructed,
    init_pretrain_strategy,
    init_random_strategy,
    train_teacher,
)
from .nets import load_checkpoint, save_checkpoint
from .report import DEFAULT_THRESHOLD, gaps_file, summarize_file

_corpus_memo = {}


def _atomic_save(pv, path):
    tmp = f"{path}.tmp"
    save_checkpoint(pv, tmp)
    os.replace(tmp, path)


def _corpus(cfg):
    key = (cfg.n_proxy, cfg.n_test, cfg.n_train, cfg.corpus_seed, cfg.image_side)
    if key not in _corpus_memo:
        _corpus_memo[key] = build_splits(
            cfg.n_proxy, cfg.n_test, cfg.n_train, cfg.corpus_seed, cfg.image_side
        )
    return _corpus_memo[key]


def _teacher_cache_path(cfg):
    return os.path.join(cfg.output_dir, f"teacher_c{cfg.corpus_seed}.ckpt")


def _ensure_teacher(cfg, corpus, echo):
    """Load the cached teacher for this corpus seed, or train it."""
    path = _teacher_cache_path(cfg)
    if os.path.exists(path):
        echo(f"teacher: using cache {path}")
        return frozen_teacher_from_params(load_checkpoint(path))
    extra = generate_uniform_set(
        cfg.corpus_seed, SPLIT_TEACHER_EXTRA,
        (cfg.teacher_train_multiple - 1) * cfg.n_proxy, cfg.image_side,
    )
    tic = time.perf_counter()
    teacher = train_teacher(
        corpus.proxy + extra, cfg.teacher_epochs, cfg.corpus_seed,
        lr=cfg.teacher_lr, batch_size=cfg.init_batch_size, log=echo,
    )
    echo(f"teacher: trained in {time.perf_counter() - tic:.1f}s, caching {path}")
    _atomic_save(teacher.export_params(), path)
    return teacher


def _distill_config(cfg):
    return DistillConfig(
        alpha=cfg.alpha, epochs=cfg.init_epochs, batch_size=cfg.init_batch_size,
        lr=cfg.init_lr, temperature=cfg.temperature,
        segment_target=cfg.segment_target,
    )


def _build_inits(cfg, corpus, teacher, echo):
    """Produce (and checkpoint) every initialization the plan needs."""
    needed = {s for s in cfg.strategies if s in FEDERATED_INITS}
    if "centralized" in cfg.strategies:
        needed.add("random")  # the pooled baseline starts from random weights
    paths = {}
    for strategy in sorted(needed):
        for seed in cfg.seeds:
            tic = time.perf_counter()
            if strategy == "random":
                pv = init_random_strategy(seed)
            elif strategy == "pretrain":
                pv = init_pretrain_strategy(
                    corpus.proxy, cfg.init_epochs, seed,
                    lr=cfg.init_lr, batch_size=cfg.init_batch_size,
                )
            else:
                pv = init_fm_instructed(corpus.proxy, teacher, _distill_config(cfg), seed)
            path = os.path.join(cfg.output_dir, init_checkpoint_name(strategy, seed))
            _atomic_save(pv, path)
            paths[(strategy, seed)] = path
            echo(f"init {strategy} seed {seed}: {time.perf_counter() - tic:.1f}s -> {path}")
    return paths


def _make_shards(cfg, train, partition, seed):
    if partition == "iid":
        return partition_iid(train, cfg.clients, seed)
    if partition == "age_skew":
        return partition_age_skew(train, cfg.clients, cfg.age_boundaries)
    if partition == "quantity_skew":
        return partition_quantity_skew(train, cfg.clients, cfg.quantity_fractions, seed)
    raise ConfigError(f"unknown partition kind '{partition}'")


def _arm_worker(args):
    """Run one (strategy, partition, seed) arm; safe to call in a
    subprocess. Returns (arm key, histories, per-client finals, seconds)."""
    cfg, strategy, partition, seed, init_path = args
    corpus = _corpus(cfg)
    fcfg = FederationConfig(
        clients=cfg.clients, rounds=cfg.rounds, local_epochs=cfg.local_epochs,
        batch_size=cfg.batch_size, lr=cfg.lr, seed=seed, partition=partition,
    )
    tic = time.perf_counter()
    client_finals = []
    if strategy == "standalone":
        shards = _make_shards(cfg, corpus.train, partition, seed)
        per_client = run_standalone(shards, fcfg, corpus.test)
        history = mean_standalone_history(per_client)
        history.strategy = "standalone"
        client_finals = [
            (shard.client_id, partition, seed, h.final_dice())
            for shard, h in zip(shards, per_client)
        ]
        final_params = None
    elif strategy == "centralized":
        init = load_checkpoint(init_path)
        history = run_centralized(init, corpus.train, fcfg, corpus.test)
        final_params = history.final_params
    else:
        init = load_checkpoint(init_path)
        shards = _make_shards(cfg, corpus.train, partition, seed)
        history = run_federated(
            init, shards, fcfg, corpus.test, strategy=strategy, partition=partition
        )
        final_params = history.final_params
    if final_params is not None:
        final_path = os.path.join(
            cfg.output_dir, f"final_{strategy}_{partition}_{seed}.ckpt"
        )
        _atomic_save(final_params, final_path)
    return (strategy, partition, seed), history, client_finals, time.perf_counter() - tic


def run_experiment(config_path, jobs=1, echo=print):
    """Execute the full experiment plan in a config file.

    Re-running the same config rewrites byte-identical outputs: the
    corpus, partitions, initializations and training are all pure
    functions of the configured seeds.
    """
    try:
        cfg = load_config(config_path)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(cfg.output_dir, exist_ok=True)
    overall = time.perf_counter()
    corpus = _corpus(cfg)
    echo(
        f"corpus: {len(corpus.train)} train / {len(corpus.test)} test / "
        f"{len(corpus.proxy)} proxy at {cfg.image_side}x{cfg.image_side} "
        f"(seed {cfg.corpus_seed})"
    )
    teacher = None
    if "fm_instructed" in cfg.strategies:
        try:
            teacher = _ensure_teacher(cfg, corpus, echo)
        except TeacherTrainingError as exc:
            print(f"teacher training failed: {exc}", file=sys.stderr)
            return 3
    init_paths = _build_inits(cfg, corpus, teacher, echo)

    arms = cfg.arms()
    payloads = []
    for strategy, partition, seed in arms:
        init_path = init_paths.get((strategy, seed))
        if strategy == "centralized":
            init_path = init_paths[("random", seed)]
        payloads.append((cfg, strategy, partition, seed, init_path))

    results = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for key, history, finals, secs in pool.map(_arm_worker, payloads):
                results[key] = (history, finals, secs)
                echo(f"arm {key[0]}/{key[1]}/seed{key[2]}: {secs:.1f}s "
                     f"final dice {history.final_dice():.4f}")
    else:
        for payload in payloads:
            key, history, finals, secs = _arm_worker(payload)
            results[key] = (history, finals, secs)
            echo(f"arm {key[0]}/{key[1]}/seed{key[2]}: {secs:.1f}s "
                 f"final dice {history.final_dice():.4f}")

    histories = [results[arm][0] for arm in arms]
    metrics_path = os.path.join(cfg.output_dir, "metrics.csv")
    tmp = metrics_path + ".tmp"
    write_metrics(histories, tmp)
    os.replace(tmp, metrics_path)

    client_rows = [row for arm in arms for row in results[arm][1]]
    if client_rows:
        sidecar = os.path.join(cfg.output_dir, "standalone_clients.csv")
        with open(sidecar + ".tmp", "w") as fh:
            fh.write("client_id,partition,seed,final_dice\n")
            for cid, partition, seed, dice in client_rows:
                fh.write(f"{cid},{partition},{seed},{dice:.6f}\n")
        os.replace(sidecar + ".tmp", sidecar)

    echo(f"wrote {metrics_path} ({len(arms)} arms) in "
         f"{time.perf_counter() - overall:.1f}s total")
    return 0


def cmd_teacher(config_path, echo=print):
    try:
        cfg = load_config(config_path)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(cfg.output_dir, exist_ok=True)
    corpus = _corpus(cfg)
    path = _teacher_cache_path(cfg)
    if os.path.exists(path):
        os.remove(path)  # explicit teacher command retrains
    try:
        _ensure_teacher(cfg, corpus, echo)
    except TeacherTrainingError as exc:
        print(f"teacher training failed: {exc}", file=sys.stderr)
        return 3
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="fedseed",
        description="Federated-averaging initialization-strategy experiments "
                    "on a synthetic segmentation corpus.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--jobs", type=int, default=1,
                       help="parallel worker processes for independent arms")
    p_run.add_argument("--quiet", action="store_true")

    p_sum = sub.add_parser("summarize", help="summary table from metrics.csv")
    p_sum.add_argument("metrics")
    p_sum.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p_sum.add_argument("--out-dir", default=None)
    p_sum.add_argument("--no-figures", action="store_true")

    p_gap = sub.add_parser("gaps", help="IID vs non-IID gap report")
    p_gap.add_argument("metrics")
    p_gap.add_argument("--out-dir", default=None)
    p_gap.add_argument("--no-figures", action="store_true")

    p_teach = sub.add_parser("teacher", help="pre-train and cache the teacher")
    p_teach.add_argument("config")

    args = parser.parse_args(argv)
    if args.command == "run":
        echo = (lambda *_: None) if args.quiet else print
        return run_experiment(args.config, jobs=args.jobs, echo=echo)
    if args.command == "teacher":
        return cmd_teacher(args.config)
    try:
        if args.command == "summarize":
            summarize_file(
                args.metrics, threshold=args.threshold,
                out_dir=args.out_dir, figures=not args.no_figures,
            )
        else:
            gaps_file(args.metrics, out_dir=args.out_dir, figures=not args.no_figures)
    except (FedseedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
