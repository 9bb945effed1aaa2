"""Class-incremental evaluation: ingest classes in blocks, score at each block.

Per episode, ``max_classes`` test classes are drawn and introduced
``increment`` at a time. At each checkpoint every introduced word's
query shots are classified against all classes seen so far. Head state
persists across checkpoints, so earlier classes are never recomputed,
and a query that goes wrong can never recover (the set of competitors
only grows while existing densities stay fixed).
"""

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .encoder import embed_batch_values
from .episodes import resolve_sample
from .head import HeadState, class_scores

__all__ = [
    "ProtocolConfig",
    "EpisodeTrace",
    "AccuracyMatrix",
    "EvalReport",
    "run_protocol",
    "per_word_volatility",
    "monotone_violations",
    "emit_report",
]

VOLATILITY_DEFINITION = (
    "pooled |accuracy delta| over all (episode, word, consecutive checkpoint) "
    "pairs where both checkpoints are defined; std is the population std of "
    "that pooled collection"
)


@dataclass
class ProtocolConfig:
    increment: int = 25
    max_classes: int = 200
    shots: int = 5
    query_shots: int = 5
    episodes: int = 10
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.increment < 1 or self.max_classes < self.increment:
            raise ValueError("need 1 <= increment <= max_classes")
        if self.max_classes % self.increment:
            raise ValueError("max_classes must be divisible by increment")
        if self.shots < 1 or self.query_shots < 1:
            raise ValueError("shots and query_shots must be >= 1")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")

    @property
    def checkpoints(self):
        return list(range(self.increment, self.max_classes + 1, self.increment))


@dataclass
class EpisodeTrace:
    """One episode's words (in introduction order) and their accuracies.

    ``acc[w, t]`` is the percentage of the word's query shots classified
    correctly at checkpoint t; NaN before the word is introduced.
    ``correct[w, t, q]`` is the 0/1 outcome per query shot (-1 before
    introduction). ``introduced_at[w]`` is the class count of the first
    checkpoint that includes the word.
    """

    words: list
    introduced_at: np.ndarray
    acc: np.ndarray
    correct: np.ndarray


@dataclass
class AccuracyMatrix:
    checkpoints: list
    query_shots: int
    episodes: list = field(default_factory=list)


@dataclass
class EvalReport:
    checkpoints: list
    mean_accuracy: list
    ci_low: list
    ci_high: list
    volatility_mean: float
    volatility_std: float
    n_pairs: int
    runtime: dict


def _run_episode(args):
    params, prior, registry, cfg, episode_seed = args
    rng = np.random.default_rng(episode_seed)
    ids = registry.class_ids
    if len(ids) < cfg.max_classes:
        raise ValueError(
            f"registry has {len(ids)} classes, protocol needs {cfg.max_classes}"
        )
    registry.require(cfg.max_classes, cfg.shots + cfg.query_shots)
    order = [ids[i] for i in rng.choice(len(ids), size=cfg.max_classes, replace=False)]

    enc = {k: v for k, v in params.items() if k not in ("rho_alpha", "rho_beta")}
    checkpoints = cfg.checkpoints
    n_cp = len(checkpoints)
    acc = np.full((cfg.max_classes, n_cp), np.nan)
    correct = np.full((cfg.max_classes, n_cp, cfg.query_shots), -1, dtype=np.int8)
    introduced_at = np.empty(cfg.max_classes, dtype=np.int64)

    head = HeadState(prior)
    query_emb = {}  # word index -> (query_shots, d) cached embeddings
    support_time = 0.0
    query_time = 0.0
    for t, n_classes in enumerate(checkpoints):
        t0 = time.perf_counter()
        for w in range(t * cfg.increment, n_classes):
            cid = order[w]
            introduced_at[w] = n_classes
            refs = registry.classes[cid]
            picks = rng.choice(len(refs), size=cfg.shots + cfg.query_shots, replace=False)
            support = [resolve_sample(refs[j]) for j in picks[: cfg.shots]]
            queries = [resolve_sample(refs[j]) for j in picks[cfg.shots :]]
            head.add_class(cid, embed_batch_values(support, enc))
            query_emb[w] = embed_batch_values(queries, enc)
        t1 = time.perf_counter()
        support_time += t1 - t0
        introduced = range(n_classes)
        stacked = np.concatenate([query_emb[w] for w in introduced])
        scores = class_scores(head, stacked)
        class_list = head.class_ids
        winners = np.argmax(scores, axis=1)
        for k, w in enumerate(introduced):
            rows = winners[k * cfg.query_shots : (k + 1) * cfg.query_shots]
            ok = np.array([class_list[r] == order[w] for r in rows], dtype=np.int8)
            correct[w, t] = ok
            acc[w, t] = 100.0 * float(ok.mean())
        query_time += time.perf_counter() - t1
    trace = EpisodeTrace(order, introduced_at, acc, correct)
    return trace, support_time, query_time


def run_protocol(params, prior, registry, cfg):
    """Evaluate frozen meta-parameters; returns (AccuracyMatrix, EvalReport)."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.episodes)
    jobs = [(params, prior, registry, cfg, s) for s in seeds]
    t_start = time.perf_counter()
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_episode, jobs))
    else:
        results = [_run_episode(j) for j in jobs]
    matrix = AccuracyMatrix(cfg.checkpoints, cfg.query_shots, [r[0] for r in results])
    support_time = sum(r[1] for r in results)
    query_time = sum(r[2] for r in results)

    per_episode_means = np.array(
        [np.nanmean(tr.acc, axis=0) for tr in matrix.episodes]
    )  # (episodes, checkpoints); at every checkpoint all introduced words count
    mean_acc = per_episode_means.mean(axis=0)
    # population std across episode means; width 0 when episodes == 1
    std = per_episode_means.std(axis=0, ddof=0)
    half = 1.96 * std / np.sqrt(cfg.episodes)
    if len(cfg.checkpoints) > 1:
        vol_mean, vol_std, n_pairs = _volatility(matrix)
    else:  # a single checkpoint has no consecutive pairs to compare
        vol_mean, vol_std, n_pairs = float("nan"), float("nan"), 0
    report = EvalReport(
        checkpoints=cfg.checkpoints,
        mean_accuracy=list(mean_acc),
        ci_low=list(mean_acc - half),
        ci_high=list(mean_acc + half),
        volatility_mean=vol_mean,
        volatility_std=vol_std,
        n_pairs=n_pairs,
        runtime={
            "support_ingest_s": support_time,
            "query_eval_s": query_time,
            "total_s": time.perf_counter() - t_start,
        },
    )
    return matrix, report


def _volatility(matrix):
    diffs = []
    for tr in matrix.episodes:
        a = tr.acc
        for w in range(a.shape[0]):
            row = a[w]
            for t in range(a.shape[1] - 1):
                if not (np.isnan(row[t]) or np.isnan(row[t + 1])):
                    diffs.append(abs(row[t + 1] - row[t]))
    if not diffs:
        raise ValueError("no consecutive checkpoint pairs to compare")
    d = np.array(diffs)
    return float(d.mean()), float(d.std(ddof=0)), len(diffs)


def per_word_volatility(matrix):
    """Mean and population std of |accuracy change| between consecutive
    checkpoints, pooled over episodes, words, and checkpoint pairs."""
    mean, std, _ = _volatility(matrix)
    return mean, std


def monotone_violations(matrix):
    """Count per-query correct-after-incorrect transitions across checkpoints.

    Zero for any frozen-encoder run: a wrong query can never become right
    again because existing class densities are constants and the running
    maximum only grows.
    """
    bad = 0
    for tr in matrix.episodes:
        c = tr.correct
        for w in range(c.shape[0]):
            for q in range(c.shape[2]):
                seen_wrong = False
                for t in range(c.shape[1]):
                    v = c[w, t, q]
                    if v < 0:
                        continue
                    if v == 0:
                        seen_wrong = True
                    elif seen_wrong:
                        bad += 1
                        seen_wrong = False
    return bad


def _fmt(x):
    return f"{float(x):.17g}"


def emit_report(report, matrix, out_dir):
    """Write curve.csv, volatility.csv, per_word.csv, and summary.json.

    Floats are serialized with 17 significant digits; re-running with the
    same seed reproduces the CSVs byte for byte.
    """
    out = out_dir
    from pathlib import Path

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["checkpoint_classes", "mean_accuracy", "ci_low", "ci_high"])
        for cp, m, lo, hi in zip(
            report.checkpoints, report.mean_accuracy, report.ci_low, report.ci_high
        ):
            w.writerow([cp, _fmt(m), _fmt(lo), _fmt(hi)])

    with open(out / "volatility.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mean", "std", "n_pairs"])
        w.writerow([_fmt(report.volatility_mean), _fmt(report.volatility_std), report.n_pairs])

    with open(out / "per_word.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["episode", "word", "introduced_at"]
        header += [f"acc_{cp}" for cp in matrix.checkpoints]
        w.writerow(header)
        for e, tr in enumerate(matrix.episodes):
            for i, word in enumerate(tr.words):
                row = [e, word, int(tr.introduced_at[i])]
                row += [
                    "" if np.isnan(v) else _fmt(v) for v in tr.acc[i]
                ]
                w.writerow(row)

    summary = {
        "checkpoints": report.checkpoints,
        "episodes": len(matrix.episodes),
        "query_shots": matrix.query_shots,
        "mean_accuracy_first": report.mean_accuracy[0],
        "mean_accuracy_last": report.mean_accuracy[-1],
        "volatility": {
            "mean": report.volatility_mean,
            "std": report.volatility_std,
            "n_pairs": report.n_pairs,
            "definition": VOLATILITY_DEFINITION,
        },
        "runtime": report.runtime,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
