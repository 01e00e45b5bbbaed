"""Orchestration: dataset manifests and generation, training with early
stopping, evaluation protocols, corpus ingestion, reproducible seeding.

Every record in a manifest regenerates bit-exactly from its recipe plus the
global seed; per-record randomness is derived with a splitmix-style 64-bit
mix so records are independent of generation order and of each other.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter
from scipy.special import logsumexp

from . import audio, degrade, features, fewshot, metrics
from .audio import AudioClip
from .errors import (ConfigError, EmptyDirectory, InsufficientClasses,
                     MissingPool, ProtocolMismatch, UnreadableFile)
from .model import Adam, BackboneConfig, EnvIdModel, load_checkpoint, save_checkpoint
from .rooms import GridSpec, RoomSpec, grid_placements, sample_room, simulate_air

MANIFEST_VERSION = 1
_M64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# seeding
# ---------------------------------------------------------------------------

def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _M64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return (z ^ (z >> 31)) & _M64


def derive_seed(*parts) -> int:
    """Mix integers and strings into one 64-bit seed."""
    h = 0
    for p in parts:
        if isinstance(p, str):
            p = int.from_bytes(
                hashlib.blake2s(p.encode(), digest_size=8).digest(), "little")
        h = splitmix64((h ^ int(p)) & _M64)
    return h


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def manifest_hash(manifest: dict) -> str:
    return hashlib.blake2s(canonical_json(manifest).encode()).hexdigest()


# ---------------------------------------------------------------------------
# hermetic speech-like source
# ---------------------------------------------------------------------------

def synth_utterance(seed: int, n_samples: int = 48000,
                    sample_rate: int = 16000) -> AudioClip:
    """Deterministic speech-like clip: a drifting glottal-pulse harmonic
    stack through randomized formant resonators, syllable-gated, with
    unvoiced noise bursts."""
    rng = np.random.Generator(np.random.PCG64(seed))
    t = np.arange(n_samples) / sample_rate
    f0 = 110.0 * 2.0 ** rng.uniform(-0.3, 0.6)
    vibrato = 1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(3, 6) * t)
    drift = np.cumsum(rng.standard_normal(n_samples)) / sample_rate
    drift = 2.0 ** (0.05 * drift / max(np.abs(drift).max(), 1e-9))
    phase = 2 * np.pi * np.cumsum(f0 * vibrato * drift) / sample_rate
    voiced = np.zeros(n_samples)
    for h in range(1, 31):
        if h * f0 > 3800.0:
            break
        voiced += np.sin(h * phase) / h
    noise = rng.standard_normal(n_samples)
    # syllable gate ~3-5 Hz, alternating voiced/unvoiced emphasis
    gate_f = rng.uniform(2.5, 5.0)
    gate = 0.5 * (1 + np.sin(2 * np.pi * gate_f * t + rng.uniform(0, 2 * np.pi)))
    gate = gate ** 1.5
    x = voiced * gate + 0.15 * noise * (1.0 - gate)
    for _ in range(3):  # formant-like resonators
        fc = rng.uniform(300.0, 3200.0)
        bw = rng.uniform(80.0, 300.0)
        r = math.exp(-math.pi * bw / sample_rate)
        theta = 2 * math.pi * fc / sample_rate
        x = lfilter([1.0], [1.0, -2 * r * math.cos(theta), r * r], x)
    x = x / max(audio.rms(x), 1e-12) * 0.1
    return AudioClip(sample_rate=sample_rate, samples=x, fixed_length=True)


# ---------------------------------------------------------------------------
# generation config and manifest
# ---------------------------------------------------------------------------

DEFAULT_PROFILE = {
    "snr_range": [-10.0, 50.0],
    "p_infinite": 1.0 / 63.0,
    "chain_lengths": [0, 1],
    "codecs": "training",
}


def _profile_from_config(cfg: dict) -> degrade.DegradationProfile:
    codecs = cfg.get("codecs", "training")
    if codecs == "training":
        pairs = degrade.TRAINING_PROFILE.codecs
    elif codecs == "none" or codecs == []:
        pairs = ()
    else:
        pairs = tuple((cid, tuple(float(b) for b in rates)) for cid, rates in codecs)
    lengths = tuple(int(k) for k in cfg.get("chain_lengths", [0, 1]))
    return degrade.DegradationProfile(
        codecs=pairs,
        snr_range=tuple(float(v) for v in cfg.get("snr_range", (-10.0, 50.0))),
        p_infinite=float(cfg.get("p_infinite", 1.0 / 63.0)),
        chain_lengths=lengths)


def _snr_to_json(v: float):
    return "inf" if v == degrade.INFINITE else float(v)


def _snr_from_json(v) -> float:
    return degrade.INFINITE if v == "inf" else float(v)


def _plan_to_json(plan: degrade.DegradationPlan) -> dict:
    return {
        "snr_db": _snr_to_json(plan.noise.snr_db),
        "noise_source": plan.noise.noise_source,
        "chain": [{"codec_id": s.codec_id, "bitrate_kbps": s.bitrate_kbps}
                  for s in plan.chain],
        "seed": plan.seed,
    }


def plan_from_json(d: dict) -> degrade.DegradationPlan:
    return degrade.DegradationPlan(
        noise=degrade.NoiseConfig(_snr_from_json(d["snr_db"]),
                                  d.get("noise_source", "white")),
        chain=tuple(degrade.CodecStep(s["codec_id"], float(s["bitrate_kbps"]))
                    for s in d["chain"]),
        seed=int(d["seed"]))


def _split_quotas(n: int, fractions: dict) -> dict:
    names = [k for k, v in fractions.items() if v > 0]
    counts = {k: max(1, int(round(fractions[k] * n))) for k in names}
    while sum(counts.values()) > n:
        counts[max(counts, key=lambda k: counts[k])] -= 1
    counts[names[0]] += n - sum(counts.values())
    return counts


def _split_rooms(room_ids: list[str], fractions: dict, rng) -> dict:
    """Assign whole rooms to splits; every split listed gets >= 1 room when
    counts allow."""
    ids = list(room_ids)
    rng.shuffle(ids)
    counts = _split_quotas(len(ids), fractions)
    out = {}
    pos = 0
    for k in counts:
        for rid in ids[pos:pos + counts[k]]:
            out[rid] = k
        pos += counts[k]
    return out


def _split_rooms_stratified(room_ids_sorted: list[str], fractions: dict) -> dict:
    """Interleave a label-sorted room list across splits so each split spans
    the label range; at every prefix the split furthest behind its quota is
    assigned next."""
    counts = _split_quotas(len(room_ids_sorted), fractions)
    names = list(counts)
    assigned = {k: 0 for k in names}
    out = {}
    for rid in room_ids_sorted:
        k = min(names, key=lambda n: (assigned[n] + 0.5) / counts[n])
        out[rid] = k
        assigned[k] += 1
    return out


def generate_dataset(config: dict, out_dir) -> dict:
    """Build a manifest and its artifacts from a generation config.

    Config keys (all optional but rooms/speech sizes): seed, rooms (counts
    per shape category), absorption (number or null for uniform draw), grid
    {rows, cols}, placements_per_room, speech_per_pair, speech_pool (path to
    an ingested pool index), profile, splits, sample_rate, max_time_s,
    write_wavs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = int(config.get("seed", 0))
    sample_rate = int(config.get("sample_rate", 16000))
    grid_cfg = config.get("grid", {})
    grid = GridSpec(rows=int(grid_cfg.get("rows", 5)),
                    cols=int(grid_cfg.get("cols", 5)))
    profile = _profile_from_config(config.get("profile", DEFAULT_PROFILE))
    max_time_s = config.get("max_time_s")

    # rooms: sampled per category, rejecting rooms the mic grid cannot fit
    counts = config.get("rooms")
    if not counts:
        raise ConfigError("config.rooms must give per-category room counts")
    room_rng = np.random.default_rng(derive_seed(seed, "rooms"))
    rooms: list[RoomSpec] = []
    absorption = config.get("absorption", None)
    for category in sorted(counts):
        for _ in range(int(counts[category])):
            for _attempt in range(1000):
                a = absorption
                if isinstance(absorption, (list, tuple)):
                    a = float(room_rng.uniform(absorption[0], absorption[1]))
                room = sample_room(category, room_rng, absorption=a)
                need = 2.0 * grid.edge_margin
                if ((grid.rows == 1 or room.length > need)
                        and (grid.cols == 1 or room.width > need)):
                    rooms.append(room)
                    break
            else:
                raise ConfigError(
                    f"could not sample a {category} room that fits the grid")

    placements_per_room = int(config.get("placements_per_room",
                                         grid.rows * grid.cols))
    speech_per_pair = int(config.get("speech_per_pair", 1))
    speech_pool = _load_pool(config.get("speech_pool"), "speech")
    noise_pool = _load_pool(config.get("noise_pool"), "noise")

    room_entries = []
    cells_of: dict[str, list] = {}
    for room in rooms:
        placements = grid_placements(room, grid)
        sel_rng = np.random.default_rng(derive_seed(seed, "cells", room.room_id))
        if placements_per_room < len(placements):
            chosen = sorted(sel_rng.choice(len(placements), placements_per_room,
                                           replace=False).tolist())
        else:
            chosen = range(len(placements))
        cells_of[room.room_id] = [placements[i].grid_index for i in chosen]
        room_entries.append({
            "room_id": room.room_id, "length": room.length, "width": room.width,
            "height": room.height, "absorption": room.absorption,
            "shape_category": room.shape_category,
            "grid": {"rows": grid.rows, "cols": grid.cols},
            "cells": [list(c) for c in cells_of[room.room_id]],
        })

    # room labels come from the first grid cell's AIR and are needed up front
    # when the split is stratified
    bank = AirBank({"sample_rate": sample_rate, "max_time_s": max_time_s,
                    "rooms": room_entries})
    for room in room_entries:
        air = bank.get(room["room_id"], tuple(room["cells"][0]))
        room["labels"] = {"rt60_sabine": air.labels["rt60_sabine"],
                          "rt60_schroeder": air.labels["rt60_schroeder"],
                          "volume": air.labels["volume"]}
    label_of = {r["room_id"]: r["labels"] for r in room_entries}

    splits = config.get("splits", {"train": 0.6, "val": 0.2, "test": 0.2})
    strategy = config.get("split_strategy", "random")
    if strategy == "random":
        split_rng = np.random.default_rng(derive_seed(seed, "splits"))
        split_of = _split_rooms([r.room_id for r in rooms], splits, split_rng)
    elif strategy == "stratified":
        ordered = sorted(room_entries,
                         key=lambda r: (r["labels"]["rt60_schroeder"],
                                        r["labels"]["volume"], r["room_id"]))
        split_of = _split_rooms_stratified([r["room_id"] for r in ordered],
                                           splits)
    else:
        raise ConfigError(f"unknown split_strategy {strategy!r}")

    records = []
    index = 0
    for room in rooms:
        for cell in cells_of[room.room_id]:
            for j in range(speech_per_pair):
                rec_rng = np.random.default_rng(derive_seed(seed, "record", index))
                if speech_pool is None:
                    speech = {"kind": "synth",
                              "seed": derive_seed(seed, "speech", index)}
                else:
                    items = speech_pool["items"]
                    speech = {"kind": "file",
                              "path": items[int(rec_rng.integers(0, len(items)))]["path"]}
                plan = degrade.sample_degradation(rec_rng, profile)
                if noise_pool is not None and plan.noise.snr_db != degrade.INFINITE:
                    items = noise_pool["items"]
                    src = items[int(rec_rng.integers(0, len(items)))]["path"]
                    plan = degrade.DegradationPlan(
                        degrade.NoiseConfig(plan.noise.snr_db, src),
                        plan.chain, plan.seed)
                records.append({
                    "index": index,
                    "split": split_of[room.room_id],
                    "room_id": room.room_id,
                    "grid_index": list(cell),
                    "speech": speech,
                    "plan": _plan_to_json(plan),
                    "labels": {"volume": room.volume,
                               "absorption": room.absorption,
                               "rt60": label_of[room.room_id]["rt60_schroeder"]},
                })
                index += 1

    manifest = {
        "version": MANIFEST_VERSION,
        "seed": seed,
        "sample_rate": sample_rate,
        "max_time_s": max_time_s,
        "profile": config.get("profile", DEFAULT_PROFILE),
        "rooms": room_entries,
        "records": records,
    }

    jobs = int(config.get("jobs", 1))
    if config.get("write_wavs", True):
        clip_dir = out / "clips"
        clip_dir.mkdir(exist_ok=True)
        # one task per room so each worker renders that room's AIRs once
        groups: dict[str, list[int]] = {}
        for rec in records:
            groups.setdefault(rec["room_id"], []).append(rec["index"])
        tasks = [(manifest, idxs, str(clip_dir)) for idxs in groups.values()]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                list(ex.map(_write_record_clips, tasks))
        else:
            for _, idxs, d in tasks:
                _write_record_clips((manifest, idxs, d), bank)
        for rec in records:
            rec["clip"] = f"clips/{rec['index']:06d}.wav"

    (out / "manifest.json").write_text(canonical_json(manifest))
    return manifest


def _load_pool(path, kind):
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise MissingPool(f"{kind} pool index {path} does not exist")
    pool = json.loads(p.read_text())
    if not pool.get("items"):
        raise MissingPool(f"{kind} pool {path} lists no items")
    return pool


def _write_record_clips(args, bank: "AirBank | None" = None):
    manifest, indices, clip_dir = args
    bank = bank or AirBank(manifest)
    for index in indices:
        clip = materialize_record(manifest, index, bank)
        audio.save_wav(Path(clip_dir) / f"{index:06d}.wav", clip)
    return len(indices)


class AirBank:
    """Renders and memoizes AIRs for the rooms of a manifest."""

    def __init__(self, manifest: dict):
        self.sample_rate = int(manifest.get("sample_rate", 16000))
        self.max_time_s = manifest.get("max_time_s")
        self.rooms = {r["room_id"]: r for r in manifest["rooms"]}
        self._airs = {}

    def room_spec(self, room_id: str) -> RoomSpec:
        r = self.rooms[room_id]
        return RoomSpec(length=r["length"], width=r["width"], height=r["height"],
                        absorption=r["absorption"],
                        shape_category=r["shape_category"], room_id=room_id)

    def get(self, room_id: str, grid_index: tuple[int, int]):
        key = (room_id, tuple(grid_index))
        if key not in self._airs:
            r = self.rooms[room_id]
            grid = GridSpec(rows=r["grid"]["rows"], cols=r["grid"]["cols"])
            spec = self.room_spec(room_id)
            placement = next(p for p in grid_placements(spec, grid)
                             if p.grid_index == tuple(grid_index))
            self._airs[key] = simulate_air(spec, placement, self.sample_rate,
                                           self.max_time_s)
        return self._airs[key]


def materialize_record(manifest: dict, index: int, bank: AirBank | None = None,
                       bridge=None) -> AudioClip:
    """Regenerate one record's degraded clip bit-exactly from its recipe."""
    rec = manifest["records"][index]
    assert rec["index"] == index
    bank = bank or AirBank(manifest)
    sr = int(manifest.get("sample_rate", 16000))
    speech = rec["speech"]
    if speech["kind"] == "synth":
        clip = synth_utterance(speech["seed"], round(audio.CLIP_SECONDS * sr), sr)
    else:
        clip = audio.standardize_length(audio.load_wav(speech["path"], target_rate=sr))
    air = bank.get(rec["room_id"], tuple(rec["grid_index"]))
    wet = degrade.convolve_reverb(clip, air)
    plan = plan_from_json(rec["plan"])
    return degrade.apply_plan(wet, plan, bridge=bridge)


class FeatureStore:
    """Lazy per-record features with a RAM memo and optional disk cache."""

    def __init__(self, manifest: dict, cache_dir=None, bridge=None):
        self.manifest = manifest
        self.bank = AirBank(manifest)
        self.bridge = bridge
        self.memo: dict[int, np.ndarray] = {}
        self.disk = features.FeatureCache(cache_dir) if cache_dir else None
        self._hash = manifest_hash(manifest)

    def _key(self, index: int) -> str:
        return f"{self._hash}-{index:06d}"

    def get(self, index: int) -> np.ndarray:
        if index in self.memo:
            return self.memo[index]
        vals = self.disk.load(self._key(index)) if self.disk else None
        if vals is None:
            clip = materialize_record(self.manifest, index, self.bank, self.bridge)
            vals = features.featurize(clip).values
            if self.disk:
                self.disk.store(self._key(index), vals)
        vals = vals.astype(np.float32)  # memo holds f32: halves RAM, model is f32
        self.memo[index] = vals
        return vals

    def batch(self, indices) -> np.ndarray:
        return np.stack([self.get(i) for i in indices])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    n_way: int = 10
    k_shot: int = 15
    episodes_per_epoch: int = 100
    max_epochs: int = 300
    patience: int = 30
    lr: float = 1e-4
    regression: bool = True
    reg_target: str = "rt60"  # or "rt60_log10" / "volume_log10"
    reg_weight: float = 1.0
    seed: int = 0
    query_cap: int = 8
    val_episodes: int = 20
    val_split: str = "val"  # manifests without val rooms can validate on train
    val_metric: str = "accuracy"  # or "loss" (includes the regression term)
    allow_fewer_classes: bool = False
    model: BackboneConfig = field(default_factory=BackboneConfig)
    enforce_budget: bool = True

    def __post_init__(self):
        if min(self.n_way, self.k_shot, self.episodes_per_epoch,
               self.max_epochs) < 1 or self.patience < 0:
            raise ConfigError("counts must be positive (patience >= 0)")
        if self.patience > self.max_epochs:
            raise ConfigError("patience exceeds max_epochs")
        if self.reg_target not in ("rt60", "rt60_log10", "volume_log10"):
            raise ConfigError(f"unknown reg_target {self.reg_target!r}")
        if self.reg_weight <= 0:
            raise ConfigError("reg_weight must be positive")
        if self.val_metric not in ("accuracy", "loss"):
            raise ConfigError(f"unknown val_metric {self.val_metric!r}")


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if "model" in d:
        m = dict(d["model"])
        if "conv_channels" in m:
            m["conv_channels"] = tuple(m["conv_channels"])
        if "input_shape" in m:
            m["input_shape"] = tuple(m["input_shape"])
        d["model"] = BackboneConfig(**m)
    try:
        return TrainConfig(**d)
    except TypeError as e:
        raise ConfigError(f"bad train config: {e}") from e


def _dataset_by_class(manifest: dict, split: str) -> dict:
    out: dict[str, list[int]] = {}
    for rec in manifest["records"]:
        if rec["split"] == split:
            out.setdefault(rec["room_id"], []).append(rec["index"])
    return out


def _reg_label(manifest: dict, index: int, target: str) -> float:
    labels = manifest["records"][index]["labels"]
    if target == "volume_log10":
        return math.log10(labels["volume"])
    if target == "rt60_log10":
        return math.log10(labels["rt60"])
    return float(labels["rt60"])


def _episode_arrays(manifest, store, episode, reg_target):
    sup_idx = [i for cid in episode.classes for i in episode.support[cid]]
    q_idx = [q[0] for q in episode.queries]
    q_cls = np.array([episode.class_index(q[1]) for q in episode.queries])
    labels = np.array([_reg_label(manifest, i, reg_target) for i in q_idx])
    return store.batch(sup_idx), store.batch(q_idx), q_cls, labels


def _episode_eval(model, store, manifest, episode, tc):
    """One validation forward pass: (per-query hits, episodic total loss)."""
    from . import autodiff as ad
    sx, qx, q_cls, labels = _episode_arrays(manifest, store, episode,
                                            tc.reg_target)
    with ad.no_grad():
        dists, emb_q = fewshot.episode_tensors(
            model, sx, qx, q_cls, episode.n_way, episode.k_shot)
        logits = -dists.values
        rows = np.arange(q_cls.size)
        loss = float(np.mean(logsumexp(logits, axis=1) - logits[rows, q_cls]))
        if tc.regression:
            preds = model.regress(emb_q).values
            loss += tc.reg_weight * float(np.mean(np.abs(preds - labels)))
    return np.argmax(logits, axis=1) == q_cls, loss


def train(manifest: dict, tc: TrainConfig, out_dir, store: FeatureStore | None = None,
          bridge=None):
    """Episodic training with early stopping on validation accuracy.

    Returns (checkpoint_path, log). The best-validation checkpoint is kept;
    training stops once the metric has not improved for `patience` epochs or
    at max_epochs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store = store or FeatureStore(manifest, bridge=bridge)
    train_ds = _dataset_by_class(manifest, "train")
    val_ds = _dataset_by_class(manifest, tc.val_split)
    if len(train_ds) < (1 if tc.allow_fewer_classes else tc.n_way):
        raise InsufficientClasses(
            f"train split has {len(train_ds)} classes, need {tc.n_way}")
    if not val_ds:
        raise InsufficientClasses(f"{tc.val_split!r} split is empty")

    model = EnvIdModel(tc.model, seed=derive_seed(tc.seed, "init"),
                       enforce_budget=tc.enforce_budget)
    opt = Adam(model.params, lr=tc.lr)

    # fixed, seeded validation episodes reused every epoch
    val_rng = np.random.default_rng(derive_seed(tc.seed, "val-episodes"))
    val_eps = []
    for _ in range(tc.val_episodes):
        val_eps.append(fewshot.sample_episode(
            val_ds, min(tc.n_way, len(val_ds)), tc.k_shot, val_rng,
            query_cap=tc.query_cap, allow_fewer_classes=True))

    ckpt_path = out / "checkpoint.envid"
    log = []
    best_score = -math.inf
    since_improve = 0
    for epoch in range(1, tc.max_epochs + 1):
        ep_rng = np.random.default_rng(derive_seed(tc.seed, "train-epoch", epoch))
        drop_rng = np.random.default_rng(derive_seed(tc.seed, "dropout", epoch))
        losses = []
        for _ in range(tc.episodes_per_epoch):
            episode = fewshot.sample_episode(
                train_ds, tc.n_way, tc.k_shot, ep_rng, query_cap=tc.query_cap,
                allow_fewer_classes=tc.allow_fewer_classes)
            sx, qx, q_cls, labels = _episode_arrays(
                manifest, store, episode, tc.reg_target)
            total, _, _ = fewshot.episode_loss(
                model, sx, qx, q_cls, labels if tc.regression else None,
                training=True, rng=drop_rng,
                n_way=episode.n_way, k_shot=episode.k_shot,
                reg_weight=tc.reg_weight)
            model.zero_grad()
            total.backward()
            opt.step()
            losses.append(float(total.values))
        evals = [_episode_eval(model, store, manifest, ep, tc)
                 for ep in val_eps]
        val_acc = float(np.concatenate([h for h, _ in evals]).mean())
        val_loss = float(np.mean([l for _, l in evals]))
        score = -val_loss if tc.val_metric == "loss" else val_acc
        improved = score > best_score
        if improved:
            best_score = score
            since_improve = 0
            save_checkpoint(ckpt_path, model, opt, epoch=epoch,
                            val_metric=score,
                            rng_state={"epoch": epoch,
                                       "episode_rng": ep_rng.bit_generator.state})
        else:
            since_improve += 1
        log.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                    "val_accuracy": val_acc, "val_loss": val_loss,
                    "improved": improved})
        if since_improve >= tc.patience:
            break
    (out / "train_log.json").write_text(json.dumps(log, indent=2))
    return str(ckpt_path), log


# ---------------------------------------------------------------------------
# evaluation protocols
# ---------------------------------------------------------------------------

PROTOCOLS = ("closed", "open", "ksweep", "positions", "regress")


def _embed_records(model, store, indices, batch: int = 16) -> np.ndarray:
    from . import autodiff as ad
    out = []
    for i in range(0, len(indices), batch):
        x = store.batch(indices[i:i + batch])
        with ad.no_grad():
            out.append(model.embed(x).values.astype(np.float64))
    return np.concatenate(out)


def _closed_episode(model, store, manifest, episode):
    """Returns (rankings, truths, n_way) for one episode."""
    sup = {cid: _embed_records(model, store, episode.support[cid])
           for cid in episode.classes}
    protos = fewshot.prototypes(sup)
    order = {p.class_id: i for i, p in enumerate(protos)}
    q_emb = _embed_records(model, store, [q[0] for q in episode.queries])
    rankings, truths = [], []
    for emb, (_, cid, _) in zip(q_emb, episode.queries):
        d = fewshot.distances(emb, protos)
        ranked = [protos[i].class_id for i in np.argsort(d, kind="stable")]
        rankings.append(ranked)
        truths.append(cid)
    return rankings, truths, protos, q_emb


def evaluate(checkpoint_path, manifest: dict, protocol: str, out_dir,
             seed: int = 0, n_way: int = 10, k_shot: int = 15,
             episodes: int = 20, query_cap: int = 8, reg_target: str = "rt60",
             store: FeatureStore | None = None, bridge=None) -> dict:
    """Run one evaluation protocol on the manifest's test split."""
    if protocol not in PROTOCOLS:
        raise ProtocolMismatch(f"unknown protocol {protocol!r}; "
                               f"choose from {PROTOCOLS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, _, _, _, _ = load_checkpoint(checkpoint_path)
    store = store or FeatureStore(manifest, bridge=bridge)
    test_ds = _dataset_by_class(manifest, "test")
    if not test_ds:
        raise ProtocolMismatch("manifest has no test split")
    rng = np.random.default_rng(derive_seed(seed, "eval", protocol))
    summary = {"protocol": protocol, "seed": seed,
               "manifest_hash": manifest_hash(manifest),
               "n_classes": len(test_ds)}

    if protocol in ("closed", "open"):
        way = min(n_way, len(test_ds))
        all_rank, all_truth = [], []
        scores = []
        for _ in range(episodes):
            episode = fewshot.sample_episode(test_ds, way, k_shot, rng,
                                             query_cap=query_cap,
                                             allow_fewer_classes=True)
            rankings, truths, protos, q_emb = _closed_episode(
                model, store, manifest, episode)
            all_rank.extend(rankings)
            all_truth.extend(truths)
            if protocol == "open":
                queries = [(e, q[1]) for e, q in zip(q_emb, episode.queries)]
                scores.extend(metrics.open_set_trial(protos, queries, rng))
        if protocol == "closed":
            tally = metrics.ConfusionTally.from_pairs(
                [r[0] for r in all_rank], all_truth)
            per_class = metrics.prf1(tally)
            summary.update({
                "n_way": way,
                "k_shot": k_shot,
                "top1": metrics.top_n_accuracy(all_rank, all_truth, 1),
                "top2": metrics.top_n_accuracy(all_rank, all_truth, 2),
                "top3": metrics.top_n_accuracy(all_rank, all_truth, 3),
                "micro_accuracy": tally.micro_accuracy(),
                "queries": len(all_truth),
            })
            metrics.write_class_report_csv(out / "per_class.csv", per_class)
        else:
            roc = metrics.roc_auc(scores)
            summary.update({
                "n_way": way, "k_shot": k_shot, "auc": roc.auc,
                "trials": len(scores),
                "known_fraction": float(np.mean([k for _, k in scores])),
                "roc_points": roc.points.tolist(),
            })

    elif protocol == "ksweep":
        sizes = {c: len(v) for c, v in test_ds.items()}
        rows = []
        for k in range(1, 16):
            usable = {c: v for c, v in sizes.items() if v > k}
            if len(usable) < 2:
                raise ProtocolMismatch(
                    f"not enough samples per class for K={k}")
            hits = []
            for _ in range(episodes):
                episode = fewshot.sample_episode(
                    {c: test_ds[c] for c in usable}, min(n_way, len(usable)),
                    k, rng, query_cap=query_cap, allow_fewer_classes=True)
                rankings, truths, _, _ = _closed_episode(
                    model, store, manifest, episode)
                hits.extend(r[0] == t for r, t in zip(rankings, truths))
            rows.append({"k": k, "top1": float(np.mean(hits))})
        summary["rows"] = rows

    elif protocol == "positions":
        by_room_cell: dict = {}
        for cid, idxs in test_ds.items():
            for i in idxs:
                cell = tuple(manifest["records"][i]["grid_index"])
                by_room_cell.setdefault(cid, {}).setdefault(cell, []).append(i)
        cells = sorted({c for room in by_room_cell.values() for c in room})
        if len(cells) < 2:
            raise ProtocolMismatch("positions protocol needs multiple grid cells")
        results = []
        for cell in cells:
            protos = []
            for cid, cells_of in by_room_cell.items():
                other = [i for c, idxs in cells_of.items() if c != cell
                         for i in idxs]
                if not other:
                    continue
                pick = rng.choice(len(other), min(k_shot, len(other)),
                                  replace=False)
                emb = _embed_records(model, store, [other[i] for i in pick])
                protos.append(fewshot.Prototype(cid, emb.mean(axis=0)))
            if len(protos) < 2:
                continue
            for cid, cells_of in by_room_cell.items():
                for i in cells_of.get(cell, []):
                    emb = _embed_records(model, store, [i])[0]
                    d = fewshot.distances(emb, protos)
                    pred = protos[int(np.argmin(d))].class_id
                    results.append((cell, pred == cid))
        rows = max(r["grid"]["rows"] for r in manifest["rooms"])
        cols = max(r["grid"]["cols"] for r in manifest["rooms"])
        acc, stats = metrics.position_accuracy_map(results, rows, cols)
        summary.update({"stats": stats,
                        "map": [[None if math.isnan(v) else v for v in row]
                                for row in acc.tolist()]})
        metrics.write_grid_report_csv(out / "position_map.csv", acc)

    elif protocol == "regress":
        from . import autodiff as ad
        idxs = sorted(i for v in test_ds.values() for i in v)
        preds = []
        for i in range(0, len(idxs), 16):
            x = store.batch(idxs[i:i + 16])
            with ad.no_grad():
                emb = model.embed(x)
                preds.append(model.regress(emb).values.astype(np.float64))
        preds = np.concatenate(preds)
        targets = np.array([_reg_label(manifest, i, reg_target) for i in idxs])
        summary["reg_target"] = reg_target
        summary["rmse"] = metrics.rmse(preds, targets)
        summary["target_std"] = float(targets.std())
        if reg_target == "rt60_log10":
            # rmse above is in log10 space; report seconds as well
            sec_pred = np.power(10.0, preds)
            sec_true = np.power(10.0, targets)
            summary["rmse_seconds"] = metrics.rmse(sec_pred, sec_true)
            summary["target_std_seconds"] = float(sec_true.std())
        if reg_target == "volume_log10":
            vol_pred = np.power(10.0, preds)
            vol_true = np.array([manifest["records"][i]["labels"]["volume"]
                                 for i in idxs])
            summary["volume_bin_accuracy"] = {
                str(n): metrics.volume_bin_classify(vol_pred, vol_true, n)
                for n in (2, 3, 5, 10)}

    metrics.write_summary_json(out / f"summary_{protocol}.json", summary)
    return summary


# ---------------------------------------------------------------------------
# corpus ingestion
# ---------------------------------------------------------------------------

def _lowest_energy_split(x: np.ndarray, sample_rate: int) -> int:
    win = max(sample_rate // 32, 16)
    energy = np.convolve(x * x, np.ones(win) / win, mode="same")
    guard = min(sample_rate // 4, x.size // 4)
    interior = energy[guard:x.size - guard]
    if interior.size == 0:
        return x.size // 2
    return guard + int(np.argmin(interior))


def segment_speech(x: np.ndarray, sample_rate: int,
                   seconds: float = audio.CLIP_SECONDS) -> list[np.ndarray]:
    """Split into fixed 3 s segments; clips shorter than one segment are
    extended by re-inserting the clip at its lowest-energy position."""
    n = round(seconds * sample_rate)
    if x.size >= n:
        return [x[i * n:(i + 1) * n] for i in range(x.size // n)]
    p = _lowest_energy_split(x, sample_rate)
    out = x
    while out.size < n:
        out = np.concatenate([out[:p], x, out[p:]])
    return [out[:n]]


def ingest_corpus(directory, kind: str, out_dir, target_rate: int = 16000) -> dict:
    """Index a directory of WAVs as a speech/air/noise pool."""
    if kind not in ("speech", "air", "noise"):
        raise ConfigError(f"unknown ingest kind {kind!r}")
    src = Path(directory)
    files = sorted(src.glob("*.wav")) + sorted(src.glob("*.WAV"))
    if not files:
        raise EmptyDirectory(f"no WAV files in {directory}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    items = []
    if kind == "speech":
        seg_dir = out / "segments"
        seg_dir.mkdir(exist_ok=True)
        for f in files:
            clip = audio.load_wav(f, target_rate=target_rate)
            for i, seg in enumerate(segment_speech(clip.samples, target_rate)):
                path = seg_dir / f"{f.stem}_{i:03d}.wav"
                audio.save_wav(path, AudioClip(target_rate, seg, fixed_length=True))
                items.append({"path": str(path), "source": str(f), "segment": i})
    else:
        for f in files:
            entry = {"path": str(f)}
            if kind == "air":
                sidecar = f.with_suffix(".json")
                if sidecar.exists():
                    try:
                        entry["labels"] = json.loads(sidecar.read_text())
                    except json.JSONDecodeError as e:
                        raise UnreadableFile(f"bad label sidecar {sidecar}: {e}")
            items.append(entry)
    index = {"kind": kind, "version": 1, "sample_rate": target_rate, "items": items}
    (out / "pool.json").write_text(canonical_json(index))
    return index


# ---------------------------------------------------------------------------
# room simulation entry (CLI `simulate-rooms`)
# ---------------------------------------------------------------------------

def simulate_rooms(config: dict, out_dir) -> dict:
    """Sample rooms and export every grid AIR as WAV + metadata sidecar."""
    out = Path(out_dir)
    (out / "airs").mkdir(parents=True, exist_ok=True)
    seed = int(config.get("seed", 0))
    rng = np.random.default_rng(derive_seed(seed, "rooms"))
    counts = config.get("rooms")
    if not counts:
        raise ConfigError("config.rooms must give per-category room counts")
    grid_cfg = config.get("grid", {})
    grid = GridSpec(rows=int(grid_cfg.get("rows", 5)),
                    cols=int(grid_cfg.get("cols", 5)))
    sample_rate = int(config.get("sample_rate", 16000))
    entries = []
    for category in sorted(counts):
        for _ in range(int(counts[category])):
            room = None
            for _attempt in range(1000):
                a = config.get("absorption")
                if isinstance(a, (list, tuple)):
                    a = float(rng.uniform(a[0], a[1]))
                cand = sample_room(category, rng, absorption=a)
                if cand.length > 2 * grid.edge_margin and \
                        cand.width > 2 * grid.edge_margin:
                    room = cand
                    break
            if room is None:
                raise ConfigError(f"no {category} room fits the grid")
            for placement in grid_placements(room, grid):
                air = simulate_air(room, placement, sample_rate,
                                   config.get("max_time_s"))
                name = f"{room.room_id}_r{placement.grid_index[0]}" \
                       f"c{placement.grid_index[1]}"
                audio.save_wav(out / "airs" / f"{name}.wav",
                               AudioClip(sample_rate, air.samples))
                meta = {"room_id": room.room_id,
                        "grid_index": list(placement.grid_index),
                        "labels": air.labels,
                        "length": room.length, "width": room.width,
                        "height": room.height, "absorption": room.absorption,
                        "shape_category": room.shape_category}
                (out / "airs" / f"{name}.json").write_text(canonical_json(meta))
                entries.append({"path": f"airs/{name}.wav", **meta})
    index = {"kind": "air", "version": 1, "sample_rate": sample_rate,
             "items": entries}
    (out / "airs.json").write_text(canonical_json(index))
    return index


def merge_reports(directory) -> dict:
    """Collect summary_*.json files under a directory into one report."""
    root = Path(directory)
    found = sorted(root.rglob("summary_*.json"))
    if not found:
        raise EmptyDirectory(f"no summary_*.json under {directory}")
    merged = {}
    for f in found:
        data = json.loads(f.read_text())
        merged[str(f.relative_to(root))] = data
    return merged
