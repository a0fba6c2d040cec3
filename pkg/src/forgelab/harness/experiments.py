"""Experiment configs, scenario runners and reports.

A run is fully determined by its flat JSON config.  Per-image work is split
into fixed-size chunks (``chunk``) that may run in worker processes
(``jobs``); the chunking never depends on ``jobs``, so records are identical
for any degree of parallelism.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .. import __version__
from ..core import RngStream, psnr, write_image
from ..denoiser.network import NetworkPredictor, TinyNet, build_tiny_network
from ..denoiser.training import TrainingConfig, train, write_trace
from ..diffusion import NoiseSchedule, detectability_curve, make_schedule
from ..distortion import TABLE_DISTORTIONS, Distortion, robustness_gap_roc, robustness_table
from ..forgery import ForgeryConfig, inject, refine, yang_baseline
from ..verify import VerificationPolicy, calibrate_threshold, match_counts
from ..watermark import DwtDctScheme, MessagePool, SpreadSpectrumScheme, build_corpus, random_message
from .synth import DOMAINS, image_source, synth_dataset

log = logging.getLogger(__name__)

SCENARIOS = ("train", "attack", "baseline", "robustness", "defense", "detectability")
# fields that locate or schedule a run but do not change its results
_RUNTIME_FIELDS = ("out", "jobs", "cache_dir", "save_images")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


@dataclass
class ExperimentConfig:
    scenario: str = "attack"
    seed: int = 0
    # data
    size: int = 32
    channels: int = 1
    n_train: int = 2000
    n_attack: int = 200
    n_reference: int = 2000
    # capture domains (see harness.synth): the provider watermarks generated
    # images; the mean-residual baseline only has photographs as clean references
    train_domain: str = "generated"
    target_domain: str = "generated"
    reference_domain: str = "photo"
    # watermark and verification
    scheme: str = "spread-spectrum"
    K: int = 32
    gamma: float = 0.015
    qim_delta: float = 24.0 / 255.0
    target_fpr: float = 1e-3
    pool_K: int = 1
    pool_sizes: list = field(default_factory=lambda: [1, 10, 50])
    # training
    iterations: int = 3000
    batch_size: int = 32
    learning_rate: float = 0.005
    momentum: float = 0.9
    ema_decay: float = 0.999
    features: int = 32
    network: Optional[str] = None
    # forgery
    T: int = 100
    T_S: int = 40
    L: int = 100
    t_l: int = 1
    eta: float = 1e-4
    lam: float = 100.0
    # robustness and detectability
    distortions: list = field(default_factory=lambda: [d.to_dict() for d in TABLE_DISTORTIONS])
    probe: dict = field(default_factory=lambda: {"kind": "gaussian-noise", "parameter": 0.05})
    pre_distortion: dict = field(default_factory=lambda: {"kind": "gaussian-noise", "parameter": 0.02})
    n_detect: int = 50
    t_grid: Optional[list] = None
    # runtime
    chunk: int = 50
    jobs: int = 1
    out: str = "runs/out"
    cache_dir: Optional[str] = None
    save_images: bool = False

    def validate(self) -> "ExperimentConfig":
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.scheme not in ("spread-spectrum", "dwt-dct"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        for name in ("n_train", "n_attack", "n_reference", "n_detect", "chunk", "jobs", "pool_K"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.pool_sizes or min(self.pool_sizes) <= 0:
            raise ValueError("pool_sizes must be non-empty positive integers")
        for name in ("train_domain", "target_domain", "reference_domain"):
            if getattr(self, name) not in DOMAINS:
                raise ValueError(f"{name} must be one of {sorted(DOMAINS)}, got {getattr(self, name)!r}")
        if self.network is not None and not os.path.exists(self.network):
            raise FileNotFoundError(f"network file {self.network} does not exist")
        # sub-config validation happens in the owning modules
        self.training_config()
        self.forgery_config()
        [Distortion.from_dict(d) for d in self.distortions]
        Distortion.from_dict(self.probe)
        Distortion.from_dict(self.pre_distortion)
        make_scheme(self)
        return self

    # -- sub-configs --------------------------------------------------------

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(iterations=self.iterations, batch_size=self.batch_size,
                              learning_rate=self.learning_rate, momentum=self.momentum,
                              seed=self.seed, ema_decay=self.ema_decay)

    def forgery_config(self) -> ForgeryConfig:
        return ForgeryConfig(T=self.T, T_S=self.T_S, L=self.L, t_l=self.t_l, eta=self.eta,
                             lam=self.lam, seed=self.seed)

    def policy(self, pool_K: Optional[int] = None) -> VerificationPolicy:
        return calibrate_threshold(self.K, self.target_fpr, pool_K or self.pool_K)

    # -- serialisation --------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def digest(self, fields: Optional[Sequence[str]] = None) -> str:
        d = self.to_dict()
        keys = fields if fields is not None else [k for k in d if k not in _RUNTIME_FIELDS]
        blob = json.dumps({k: d[k] for k in keys}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ExperimentReport:
    scenario: str
    config: dict
    config_hash: str
    version: str
    threshold_c: int
    records: list
    aggregates: dict
    extras: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        return cls(**json.loads(text))

    def write(self, out) -> Path:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        write_records_csv(self.records, out / "table.csv")
        return out

    @classmethod
    def load(cls, path) -> "ExperimentReport":
        path = Path(path)
        if path.is_dir():
            path = path / "report.json"
        return cls.from_json(path.read_text())


def write_records_csv(records: list, path) -> None:
    cols = []
    for r in records:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in records:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


# -- aggregation ------------------------------------------------------------------

_NON_METRIC = ("index", "best_match", "threshold_c", "pool_K")


def _group_key(r: dict, group_by: Optional[str]):
    return "all" if group_by is None else str(r[group_by])


def aggregate(records: list, group_by: Optional[str] = None) -> dict:
    """Means of every numeric record field, per group; ``fpr``/``tpr`` alias detection rates.

    Records are reduced in ``index`` order with an exactly rounded sum, so the
    result does not depend on the order records were produced in.
    """
    groups: dict = {}
    for r in sorted(records, key=lambda r: (_group_key(r, group_by), r.get("index", 0))):
        groups.setdefault(_group_key(r, group_by), []).append(r)
    out = {}
    for g, rows in groups.items():
        agg = {"n": len(rows)}
        for k, v in rows[0].items():
            if k in _NON_METRIC or k == group_by or isinstance(v, str) or v is None:
                continue
            agg[f"mean_{k}"] = math.fsum(float(r[k]) for r in rows) / len(rows)
        if "mean_detected" in agg:
            agg["fpr"] = agg["mean_detected"]
        if "mean_genuine_detected" in agg:
            agg["tpr"] = agg["mean_genuine_detected"]
        out[g] = agg
    return out


def check_report(report: ExperimentReport) -> bool:
    """True when the stored aggregates equal a fresh recomputation from the records."""
    group_by = report.extras.get("group_by")
    fresh = aggregate(report.records, group_by)
    return json.dumps(fresh, sort_keys=True) == json.dumps(report.aggregates, sort_keys=True)


# -- building blocks -----------------------------------------------------------------

def make_scheme(cfg: ExperimentConfig):
    if cfg.scheme == "dwt-dct":
        return DwtDctScheme(K=cfg.K, delta=cfg.qim_delta, seed=cfg.seed)
    return SpreadSpectrumScheme(K=cfg.K, gamma=cfg.gamma, seed=cfg.seed)


def root_stream(cfg: ExperimentConfig) -> RngStream:
    return RngStream(cfg.seed)


def target_message(cfg: ExperimentConfig) -> np.ndarray:
    return random_message(cfg.K, root_stream(cfg).child("message"))


def message_pool(cfg: ExperimentConfig, pool_K: int) -> MessagePool:
    return MessagePool.random(pool_K, cfg.K, root_stream(cfg).child("pool").child(pool_K))


def clean_targets(cfg: ExperimentConfig) -> np.ndarray:
    """Clean attack targets; never seen by the provider or the attacker's training."""
    return np.stack(synth_dataset(cfg.n_attack, cfg.size, root_stream(cfg).child("targets"),
                                  cfg.channels, cfg.target_domain))


def genuine_set(cfg: ExperimentConfig) -> np.ndarray:
    """Fresh provider outputs: watermarked images from the training domain."""
    clean = np.stack(synth_dataset(cfg.n_attack, cfg.size, root_stream(cfg).child("genuine"),
                                   cfg.channels, cfg.train_domain))
    return make_scheme(cfg).embed(clean, target_message(cfg))


def reference_set(cfg: ExperimentConfig) -> np.ndarray:
    return np.stack(synth_dataset(cfg.n_reference, cfg.size, root_stream(cfg).child("reference"),
                                  cfg.channels, cfg.reference_domain))


def training_corpus(cfg: ExperimentConfig, m, stats: Optional[dict] = None) -> np.ndarray:
    source = image_source(cfg.size, root_stream(cfg).child("corpus"), cfg.channels, cfg.train_domain)
    return np.stack(build_corpus(source, make_scheme(cfg), m, cfg.n_train, stats=stats))


_TRAIN_FIELDS = ("seed", "size", "channels", "n_train", "train_domain", "scheme", "K", "gamma",
                 "qim_delta", "iterations", "batch_size", "learning_rate", "momentum", "ema_decay",
                 "features", "T")


def read_trace(path) -> list:
    with open(path, newline="") as fh:
        return [float(row["loss"]) for row in csv.DictReader(fh)]


def obtain_network(cfg: ExperimentConfig, schedule: NoiseSchedule, pool_K: Optional[int] = None):
    """Load, fetch from cache, or train the noise predictor.

    ``pool_K=None`` trains on the single target message; otherwise on a pool.
    Returns ``(predictor, loss trace)``; the trace is empty for a loaded file.
    """
    if cfg.network is not None:
        with stage("load-network"):
            return NetworkPredictor(TinyNet.load(cfg.network), schedule), []
    key = cfg.digest(_TRAIN_FIELDS) + ("" if pool_K is None else f"-pool{pool_K}")
    cache = None if cfg.cache_dir is None else Path(cfg.cache_dir) / f"net-{key}.bin"
    trace_file = None if cache is None else cache.with_suffix(".loss.csv")
    if cache is not None and cache.exists() and trace_file.exists():
        with stage("load-network"):
            log.info("using cached network %s", cache)
            return NetworkPredictor(TinyNet.load(cache), schedule), read_trace(trace_file)
    with stage("corpus"):
        m = target_message(cfg) if pool_K is None else message_pool(cfg, pool_K)
        stats: dict = {}
        corpus = training_corpus(cfg, m, stats)
        log.info("corpus acceptance rate %.3f", stats["acceptance_rate"])
    with stage("train"):
        pred = build_tiny_network(cfg.size, cfg.channels, cfg.seed, schedule, features=cfg.features)
        t0 = time.perf_counter()
        pred, trace = train(pred, corpus, schedule, cfg.training_config())
        log.info("trained network %s in %.1fs", key, time.perf_counter() - t0)
    if cache is not None:
        with stage("cache-network"):
            cache.parent.mkdir(parents=True, exist_ok=True)
            suffix = f".tmp{os.getpid()}"
            pred.net.save(cache.with_suffix(suffix))
            write_trace(trace, trace_file.with_suffix(suffix))
            os.replace(trace_file.with_suffix(suffix), trace_file)
            os.replace(cache.with_suffix(suffix), cache)
    return pred, trace


def _chunks(n: int, size: int):
    return [(s, min(s + size, n)) for s in range(0, n, size)]


def _forge_chunk(args):
    pred, schedule, fcfg, images, start = args
    x_f = inject(images, pred, schedule, fcfg)
    res = refine(x_f, images, pred, schedule, fcfg, indices=range(start, start + len(images)))
    return x_f, res.forged


def _inject_chunk(args):
    pred, schedule, fcfg, images, _ = args
    return inject(images, pred, schedule, fcfg)


def _refine_chunk(args):
    pred, schedule, fcfg, x_f, images, start = args
    return refine(x_f, images, pred, schedule, fcfg, indices=range(start, start + len(images))).forged


def fan_out(fn, tasks: list, jobs: int) -> list:
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as ex:
        return list(ex.map(fn, tasks))


def forge(cfg: ExperimentConfig, pred, schedule: NoiseSchedule, targets: np.ndarray,
          fcfg: Optional[ForgeryConfig] = None):
    """Inject + refine every target in fixed chunks; returns ``(pre_refinement, forged)``."""
    fcfg = fcfg or cfg.forgery_config()
    tasks = [(pred, schedule, fcfg, targets[a:b], a) for a, b in _chunks(len(targets), cfg.chunk)]
    parts = fan_out(_forge_chunk, tasks, cfg.jobs)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def inject_all(cfg, pred, schedule, targets, fcfg):
    tasks = [(pred, schedule, fcfg, targets[a:b], a) for a, b in _chunks(len(targets), cfg.chunk)]
    return np.concatenate(fan_out(_inject_chunk, tasks, cfg.jobs))


def refine_all(cfg, pred, schedule, x_f, targets, fcfg):
    tasks = [(pred, schedule, fcfg, x_f[a:b], targets[a:b], a) for a, b in _chunks(len(targets), cfg.chunk)]
    return np.concatenate(fan_out(_refine_chunk, tasks, cfg.jobs))


def attack_records(scheme, m, policy: VerificationPolicy, targets, forged, pre=None, genuine=None) -> list:
    """One record per target: quality and verification of the forged image plus controls."""
    records = []
    ext = scheme.extract(forged)
    ext_clean = scheme.extract(targets)
    ext_pre = None if pre is None else scheme.extract(pre)
    ext_gen = None if genuine is None else scheme.extract(genuine)
    for i in range(len(targets)):
        hits = int(np.sum(ext[i] == m))
        clean_hits = int(np.sum(ext_clean[i] == m))
        r = {"index": i, "psnr": psnr(targets[i], forged[i]), "bit_accuracy": hits / cfg_K(m),
             "detected": hits >= policy.c, "control_bit_accuracy": clean_hits / cfg_K(m),
             "control_detected": clean_hits >= policy.c}
        if ext_pre is not None:
            pre_hits = int(np.sum(ext_pre[i] == m))
            r.update(psnr_injected=psnr(targets[i], pre[i]), bit_accuracy_injected=pre_hits / cfg_K(m),
                     detected_injected=pre_hits >= policy.c)
        if ext_gen is not None:
            r["genuine_detected"] = int(np.sum(ext_gen[i] == m)) >= policy.c
        records.append(r)
    return records


def cfg_K(m) -> int:
    return int(np.asarray(m).shape[-1])


def _dump_images(out: Path, name: str, images) -> None:
    d = out / "images"
    d.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        ext = "ppm" if img.shape[-1] == 3 else "pgm"
        write_image(img, d / f"{name}_{i:04d}.{ext}")


# -- scenarios ---------------------------------------------------------------------

def _scenario_train(cfg, schedule, out):
    pred, trace = obtain_network(cfg, schedule)
    with stage("write-network"):
        out.mkdir(parents=True, exist_ok=True)
        pred.net.save(out / "network.bin")
        if trace:
            write_trace(trace, out / "loss.csv")
    records = [{"index": i, "loss": float(v)} for i, v in enumerate(trace)]
    extras = {"n_params": pred.net.n_params,
              "final_loss_avg100": math.fsum(trace[-100:]) / len(trace[-100:]) if trace else None}
    return records, None, extras


def _scenario_attack(cfg, schedule, out):
    scheme, m, policy = make_scheme(cfg), target_message(cfg), cfg.policy()
    pred, _ = obtain_network(cfg, schedule)
    info = {}
    with stage("targets"):
        targets = clean_targets(cfg)
        genuine = genuine_set(cfg)
    with stage("forge"):
        t0 = time.perf_counter()
        pre, forged = forge(cfg, pred, schedule, targets)
        log.info("forged %d images in %.1fs", len(targets), time.perf_counter() - t0)
    with stage("evaluate"):
        records = attack_records(scheme, m, policy, targets, forged, pre, genuine)
    if cfg.save_images:
        _dump_images(out, "forged", forged)
    return records, None, info


def _scenario_baseline(cfg, schedule, out):
    scheme, m, policy = make_scheme(cfg), target_message(cfg), cfg.policy()
    with stage("corpus"):
        corpus = training_corpus(cfg, m)
    with stage("targets"):
        targets = clean_targets(cfg)
        ref = reference_set(cfg)
        genuine = genuine_set(cfg)
    with stage("forge"):
        forged = yang_baseline(corpus, ref, targets)
    with stage("evaluate"):
        records = attack_records(scheme, m, policy, targets, forged, genuine=genuine)
    if cfg.save_images:
        _dump_images(out, "baseline", forged)
    return records, None, {}


def _scenario_robustness(cfg, schedule, out):
    scheme, m = make_scheme(cfg), target_message(cfg)
    pred, _ = obtain_network(cfg, schedule)
    info = {}
    with stage("targets"):
        targets = clean_targets(cfg)
        genuine = genuine_set(cfg)
    with stage("forge"):
        _, forged = forge(cfg, pred, schedule, targets)
    stream = root_stream(cfg).child("distortion")
    distortions = [Distortion.from_dict(d) for d in cfg.distortions]
    with stage("distort"):
        from ..distortion import apply_each, per_image_accuracy
        records = []
        for d in [Distortion("none")] + [d for d in distortions if d.kind != "none"]:
            sg = stream.child(d.label).child("genuine")
            sf = stream.child(d.label).child("forged")
            acc_g = per_image_accuracy(scheme, apply_each(d, genuine, sg), m)
            acc_f = per_image_accuracy(scheme, apply_each(d, forged, sf), m)
            records += [{"index": i, "distortion": d.label, "genuine_bit_accuracy": float(acc_g[i]),
                         "forged_bit_accuracy": float(acc_f[i])} for i in range(len(targets))]
    with stage("roc"):
        probe = Distortion.from_dict(cfg.probe)
        pre = Distortion.from_dict(cfg.pre_distortion)
        roc_clean = robustness_gap_roc(genuine, forged, scheme, m, probe, stream.child("roc"))
        roc_pre = robustness_gap_roc(genuine, forged, scheme, m, probe, stream.child("roc"), genuine_pre=pre)
        info["roc"] = {name: {"auc": r["auc"], "fpr": r["fpr"].tolist(), "tpr": r["tpr"].tolist()}
                       for name, r in (("clean_genuine", roc_clean), ("pre_distorted_genuine", roc_pre))}
    with stage("write-table"):
        out.mkdir(parents=True, exist_ok=True)
        from ..distortion import write_table
        write_table(robustness_table(genuine, forged, scheme, m, distortions, stream), out / "robustness.csv")
    return records, "distortion", info


def _scenario_defense(cfg, schedule, out):
    scheme = make_scheme(cfg)
    with stage("targets"):
        targets = clean_targets(cfg)
    records, info = [], {}
    for pool_K in cfg.pool_sizes:
        pool = message_pool(cfg, pool_K)
        policy = cfg.policy(pool_K)
        pred, _ = obtain_network(cfg, schedule, pool_K=pool_K)
        with stage(f"forge-pool{pool_K}"):
            _, forged = forge(cfg, pred, schedule, targets)
        with stage(f"verify-pool{pool_K}"):
            counts = match_counts(pool.messages, scheme.extract(forged))
            for i in range(len(targets)):
                best = int(np.argmax(counts[i]))
                records.append({"index": i, "pool_K": pool_K, "threshold_c": policy.c,
                                "best_match": best, "bit_accuracy": int(counts[i, best]) / cfg.K,
                                "detected": bool(counts[i, best] >= policy.c),
                                "psnr": psnr(targets[i], forged[i])})
    return records, "pool_K", info


def _scenario_detectability(cfg, schedule, out):
    scheme, m = make_scheme(cfg), target_message(cfg)
    pred, _ = obtain_network(cfg, schedule)
    info = {}
    with stage("detectability"):
        stream = root_stream(cfg).child("detect")
        clean = np.stack(synth_dataset(cfg.n_detect, cfg.size, stream.child("images"), cfg.channels, cfg.train_domain))
        rows = detectability_curve(scheme.embed(clean, m), scheme, m, pred, schedule, stream,
                                   t_grid=cfg.t_grid, control_images=clean)
    records = [{"index": i, "t": t, "acc_noised": a, "acc_denoised": b, "acc_control": c}
               for i, (t, a, b, c) in enumerate(rows)]
    return records, None, info


_RUNNERS = {"train": _scenario_train, "attack": _scenario_attack, "baseline": _scenario_baseline,
            "robustness": _scenario_robustness, "defense": _scenario_defense,
            "detectability": _scenario_detectability}


def run(cfg: ExperimentConfig, write: bool = True) -> ExperimentReport:
    """Execute ``cfg.scenario`` end to end; failures raise :class:`StageError`."""
    t0 = time.perf_counter()
    with stage("config"):
        cfg.validate()
        schedule = make_schedule(T=cfg.T)
    out = Path(cfg.out)
    records, group_by, extras = _RUNNERS[cfg.scenario](cfg, schedule, out)
    if group_by is not None:
        extras["group_by"] = group_by
    report = ExperimentReport(scenario=cfg.scenario, config=cfg.to_dict(), config_hash=cfg.digest(),
                              version=__version__, threshold_c=cfg.policy().c, records=records,
                              aggregates=aggregate(records, group_by), extras=extras,
                              wall_time=time.perf_counter() - t0)
    if write:
        with stage("write-report"):
            report.write(out)
    return report


def ablate(cfg: ExperimentConfig, parameter: str, values: Sequence, write: bool = True) -> list:
    """Sweep ``L`` or ``lam`` on one trained network and one set of targets.

    Returns rows ``(value, mean PSNR, mean bit accuracy, FPR)``.
    """
    if parameter not in ("L", "lam"):
        raise ValueError("parameter must be 'L' or 'lam'")
    if len(values) == 0:
        raise ValueError("values must be non-empty")
    with stage("config"):
        cfg = cfg.replace(scenario="attack").validate()
        schedule = make_schedule(T=cfg.T)
    scheme, m, policy = make_scheme(cfg), target_message(cfg), cfg.policy()
    pred, _ = obtain_network(cfg, schedule)
    with stage("targets"):
        targets = clean_targets(cfg)
    with stage("inject"):
        # injection does not depend on L or lambda, so it is shared by every point
        x_f = inject_all(cfg, pred, schedule, targets, cfg.forgery_config())
    rows = []
    for v in values:
        vcfg = cfg.replace(**{parameter: type(getattr(cfg, parameter))(v)})
        with stage(f"refine-{parameter}={v}"):
            forged = refine_all(vcfg, pred, schedule, x_f, targets, vcfg.forgery_config())
            agg = aggregate(attack_records(scheme, m, policy, targets, forged))["all"]
        rows.append((v, agg["mean_psnr"], agg["mean_bit_accuracy"], agg["fpr"]))
    if write:
        with stage("write-ablation"):
            out = Path(cfg.out)
            out.mkdir(parents=True, exist_ok=True)
            with open(out / f"ablation_{parameter}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow([parameter, "psnr", "bit_accuracy", "fpr"])
                w.writerows([(v, repr(p), repr(a), repr(f)) for v, p, a, f in rows])
    return rows
