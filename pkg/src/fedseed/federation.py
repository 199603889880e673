"""Federated averaging orchestration plus the centralized/standalone baselines.

One round: every client trains a fresh copy of the global parameters for
`local_epochs` epochs on its private shard (dice loss, Adam, fresh
optimizer state), the server takes the dataset-size-weighted mean of the
returned parameter vectors, and the new global model is scored on the
held-out test set.

Centralized training reuses the identical round engine with a single
pooled shard, which is also what makes the K=1 federated run equal the
centralized run bit for bit. Standalone training runs the same loop per
client without any aggregation.
"""

from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .data import ClientShard, augment
from .errors import ConfigError, ContractError
from .losses import dice_loss, dice_score
from .nets import (
    STUDENT_SPEC, ParamEntry, ParamVector,
    build_model, export_params, import_params,
)

_LOCAL_STREAM = 0x4C4F43
_STANDALONE_INIT_STREAM = 0x53544E44

METRICS_COLUMNS = (
    "round", "strategy", "partition", "seed",
    "test_dice", "mean_train_loss", "seconds",
)


@dataclass
class FederationConfig:
    clients: int = 3
    rounds: int = 30
    local_epochs: int = 2
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 1
    partition: str = "iid"

    def __post_init__(self):
        if self.clients < 1:
            raise ConfigError(f"clients must be >= 1, got {self.clients}")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.local_epochs < 1:
            raise ConfigError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class RoundRecord:
    round: int
    test_dice: float
    mean_train_loss: float
    seconds: float


@dataclass
class RunHistory:
    strategy: str
    partition: str
    seed: int
    records: list = field(default_factory=list)
    final_params: object = None

    def final_dice(self):
        return self.records[-1].test_dice

    def rounds_to_threshold(self, threshold):
        """First round whose test dice reaches `threshold`, or None."""
        for rec in self.records:
            if rec.test_dice >= threshold:
                return rec.round
        return None


def _train_epochs(params, samples, epochs, cfg, rng, spec, augment_on=True):
    """Shared round engine: import params, run `epochs` of Adam over the
    shard, return (new params, per-epoch mean losses).

    The rng drives both the shuffle and the per-sample augmentation, in
    a fixed order, so a seed fully determines the result.
    """
    model = build_model(spec, 0)
    import_params(model, params)
    model.set_trainable(True)
    opt = Adam(model.parameters(), lr=cfg.lr)
    epoch_losses = []
    n = len(samples)
    for _ in range(epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            chunk = order[start : start + cfg.batch_size]
            batch = [samples[i] for i in chunk]
            if augment_on:
                batch = [augment(s, rng) for s in batch]
            x = Tensor(np.stack([s.image for s in batch]))
            y = Tensor(np.stack([s.mask for s in batch]))
            probs = ad.sigmoid(model.forward(x))
            loss = dice_loss(probs, y)
            opt.zero_grad()
            loss.value.backward()
            opt.step()
            batch_losses.append(loss.item())
        epoch_losses.append(float(np.mean(batch_losses)))
    return export_params(model), epoch_losses


def local_update(shard, global_params, cfg, round_idx=1, spec=STUDENT_SPEC):
    """One client's round: E local epochs starting from the global model.

    Optimizer state never survives between rounds; only parameters do.
    Returns the updated ParamVector and the client's mean train loss.
    """
    if shard.count == 0:
        raise ContractError(f"client {shard.client_id} has an empty shard")
    rng = np.random.default_rng(
        np.random.SeedSequence(
            (int(cfg.seed), _LOCAL_STREAM, int(round_idx), int(shard.client_id))
        )
    )
    params, epoch_losses = _train_epochs(
        global_params, shard.samples, cfg.local_epochs, cfg, rng, spec
    )
    return params, float(np.mean(epoch_losses))


def _digest(pv, count):
    h = hashlib.sha256()
    h.update(str(int(count)).encode())
    for entry in pv:
        h.update(entry.values.tobytes())
    return h.digest()


def aggregate(local_params, counts):
    """Dataset-size-weighted elementwise mean of client parameter vectors.

    Inputs are first put into a canonical order (by count, then content
    digest) and accumulated in float64, so the result is exactly
    invariant under joint permutations of (locals, counts).
    """
    if len(local_params) != len(counts):
        raise ContractError("aggregate: params/counts length mismatch")
    if not local_params:
        raise ContractError("aggregate: need at least one client")
    if any(c <= 0 for c in counts):
        raise ContractError(f"aggregate: counts must be positive, got {counts}")
    fp = local_params[0].fingerprint()
    for k, pv in enumerate(local_params):
        if pv.fingerprint() != fp:
            for a, b in zip(fp, pv.fingerprint()):
                if a != b:
                    raise ContractError(
                        f"aggregate: client {k} architecture mismatch at entry "
                        f"{b[0]} {b[1]} (expected {a[0]} {a[1]})"
                    )
            raise ContractError(f"aggregate: client {k} architecture mismatch")
    order = sorted(
        range(len(local_params)),
        key=lambda k: (counts[k], _digest(local_params[k], counts[k])),
    )
    total = float(sum(counts))
    out = []
    for i, (name, shape) in enumerate(fp):
        acc = np.zeros(shape, dtype=np.float64)
        for k in order:
            acc += (counts[k] / total) * local_params[k].entries[i].values.astype(np.float64)
        out.append(ParamEntry(name, acc.astype(np.float32)))
    return ParamVector(out)


def evaluate(params, test_set, spec=STUDENT_SPEC, threshold=0.5, batch_size=60):
    """Mean dice score over the test set, masks thresholded at 0.5.

    No augmentation, no gradients; per-sample scores are summed in
    sorted float64 order so the mean is independent of iteration order.
    """
    if not test_set:
        raise ContractError("evaluate: test set is empty")
    model = build_model(spec, 0)
    import_params(model, params)
    model.set_trainable(False)
    return evaluate_model(model, test_set, threshold, batch_size)


def evaluate_model(model, test_set, threshold=0.5, batch_size=60):
    scores = []
    for start in range(0, len(test_set), batch_size):
        batch = test_set[start : start + batch_size]
        x = Tensor(np.stack([s.image for s in batch]))
        logits = model.forward(x)
        probs = ad._sigmoid_np(logits.data)
        preds = (probs > threshold).astype(np.float32)
        for pred, s in zip(preds, batch):
            scores.append(dice_score(pred, s.mask))
    ordered = np.sort(np.asarray(scores, dtype=np.float64))
    return float(ordered.sum() / len(ordered))


def run_federated(init, shards, cfg, test_set, spec=STUDENT_SPEC,
                  strategy="federated", partition=None, log=None):
    """Full FedAvg loop; returns the per-round history plus final params."""
    if not shards:
        raise ContractError("run_federated: no client shards")
    history = RunHistory(strategy, partition or cfg.partition, cfg.seed)
    global_params = init
    for t in range(1, cfg.rounds + 1):
        tic = time.perf_counter()
        results = [local_update(sh, global_params, cfg, t, spec) for sh in shards]
        global_params = aggregate(
            [p for p, _ in results], [sh.count for sh in shards]
        )
        dice = evaluate(global_params, test_set, spec)
        mean_loss = float(np.mean([loss for _, loss in results]))
        history.records.append(
            RoundRecord(t, dice, mean_loss, time.perf_counter() - tic)
        )
        if log:
            log(f"[{strategy}/{history.partition}/s{cfg.seed}] "
                f"round {t}/{cfg.rounds} dice={dice:.4f} loss={mean_loss:.4f}")
    history.final_params = global_params
    return history


def run_centralized(init, train, cfg, test_set, spec=STUDENT_SPEC,
                    strategy="centralized", log=None):
    """Pooled-data baseline driven by the same round engine (a K=1
    federation without the aggregation step)."""
    shard = ClientShard(0, list(train))
    history = RunHistory(strategy, "pooled", cfg.seed)
    params = init
    for t in range(1, cfg.rounds + 1):
        tic = time.perf_counter()
        params, mean_loss = local_update(shard, params, cfg, t, spec)
        dice = evaluate(params, test_set, spec)
        history.records.append(
            RoundRecord(t, dice, mean_loss, time.perf_counter() - tic)
        )
        if log:
            log(f"[{strategy}/s{cfg.seed}] round {t}/{cfg.rounds} dice={dice:.4f}")
    history.final_params = params
    return history


def run_standalone(shards, cfg, test_set, spec=STUDENT_SPEC, log=None):
    """Each client trains privately for rounds*local_epochs epochs.

    All clients start from the same seeded random initialization; no
    parameters are ever exchanged. Returns one history per client.
    """
    init = export_params(build_model(spec, cfg.seed))
    histories = []
    for shard in shards:
        history = RunHistory(f"standalone_client{shard.client_id}", cfg.partition, cfg.seed)
        params = init
        for t in range(1, cfg.rounds + 1):
            tic = time.perf_counter()
            params, mean_loss = local_update(shard, params, cfg, t, spec)
            dice = evaluate(params, test_set, spec)
            history.records.append(
                RoundRecord(t, dice, mean_loss, time.perf_counter() - tic)
            )
        history.final_params = params
        histories.append(history)
        if log:
            log(f"[standalone c{shard.client_id}/s{cfg.seed}] final dice={history.final_dice():.4f}")
    return histories


def mean_standalone_history(histories, strategy="standalone"):
    """Collapse per-client standalone histories into one mean curve."""
    if not histories:
        raise ContractError("no standalone histories to average")
    out = RunHistory(strategy, histories[0].partition, histories[0].seed)
    for i in range(len(histories[0].records)):
        recs = [h.records[i] for h in histories]
        out.records.append(
            RoundRecord(
                recs[0].round,
                float(np.mean(sorted(r.test_dice for r in recs))),
                float(np.mean(sorted(r.mean_train_loss for r in recs))),
                float(np.sum([r.seconds for r in recs])),
            )
        )
    return out


def write_metrics(histories, path):
    """Write run histories as CSV, one row per round.

    The `seconds` column is emitted as 0.000000: byte-identical output
    across reruns is part of the contract, and wall-clock timings (kept
    in memory on RunHistory) would break it. Timings are printed by the
    CLI instead.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for hist in histories:
            for rec in hist.records:
                writer.writerow([
                    rec.round, hist.strategy, hist.partition, hist.seed,
                    f"{rec.test_dice:.6f}", f"{rec.mean_train_loss:.6f}",
                    "0.000000",
                ])


def read_metrics(path):
    """Parse a metrics CSV back into a list of typed row dicts."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(METRICS_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ConfigError(f"{path}: missing columns {sorted(missing)}")
        for raw in reader:
            rows.append({
                "round": int(raw["round"]),
                "strategy": raw["strategy"],
                "partition": raw["partition"],
                "seed": int(raw["seed"]),
                "test_dice": float(raw["test_dice"]),
                "mean_train_loss": float(raw["mean_train_loss"]),
                "seconds": float(raw["seconds"]),
            })
    return rows
