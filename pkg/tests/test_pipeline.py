"""Pipeline behavior: manifest generation and regeneration, training loop,
evaluation protocols, corpus ingestion, report merging, CLI exit codes."""

import copy
import json
from pathlib import Path

import numpy as np
import pytest

from envid import audio, cli, pipeline
from envid.audio import AudioClip
from envid.errors import (ConfigError, EmptyDirectory, InsufficientClasses,
                          MissingPool, ProtocolMismatch, UnreadableFile)
from envid.model import BackboneConfig

TOY = BackboneConfig(conv_channels=(4, 8, 8), dense_dim=32, embed_dim=16,
                     reg_hidden=8, dropout=0.0)


def micro_config(seed=7, **over):
    cfg = {
        "seed": seed,
        "rooms": {"square": 3, "rectangle": 3},
        "absorption": 0.6,
        "grid": {"rows": 2, "cols": 2},
        "speech_per_pair": 2,
        "splits": {"train": 0.5, "val": 1 / 6, "test": 1 / 3},
        "profile": {"codecs": "none", "chain_lengths": [0], "p_infinite": 1.0},
        "write_wavs": False,
    }
    cfg.update(over)
    return cfg


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    out = tmp_path_factory.mktemp("world")
    manifest = pipeline.generate_dataset(micro_config(), out)
    return manifest, pipeline.FeatureStore(manifest), out


def toy_train_config(**over):
    kw = dict(n_way=2, k_shot=3, episodes_per_epoch=2, max_epochs=2,
              patience=2, lr=1e-3, seed=3, query_cap=4, val_episodes=2,
              val_split="val", model=TOY, enforce_budget=False)
    kw.update(over)
    return pipeline.TrainConfig(**kw)


@pytest.fixture(scope="module")
def trained(world, tmp_path_factory):
    manifest, store, _ = world
    out = tmp_path_factory.mktemp("trained")
    ckpt, log = pipeline.train(manifest, toy_train_config(), out, store=store)
    return ckpt, log, manifest, store


class TestSeeding:
    def test_derive_seed_deterministic(self):
        assert pipeline.derive_seed(1, "a", 2) == pipeline.derive_seed(1, "a", 2)

    def test_derive_seed_order_sensitive(self):
        assert pipeline.derive_seed(1, 2) != pipeline.derive_seed(2, 1)
        assert pipeline.derive_seed(0, "x") != pipeline.derive_seed(0, "y")

    def test_canonical_json_ignores_key_order(self):
        a = pipeline.canonical_json({"b": 1, "a": [1, 2]})
        b = pipeline.canonical_json({"a": [1, 2], "b": 1})
        assert a == b

    def test_manifest_hash_tracks_content(self):
        m = {"records": [1, 2, 3]}
        h = pipeline.manifest_hash(m)
        assert h == pipeline.manifest_hash(copy.deepcopy(m))
        assert h != pipeline.manifest_hash({"records": [1, 2, 4]})


class TestSynthUtterance:
    def test_deterministic_per_seed(self):
        a = pipeline.synth_utterance(5)
        b = pipeline.synth_utterance(5)
        np.testing.assert_array_equal(a.samples, b.samples)
        assert np.any(a.samples != pipeline.synth_utterance(6).samples)

    def test_shape_and_level(self):
        clip = pipeline.synth_utterance(0)
        assert clip.samples.size == 48000 and clip.sample_rate == 16000
        assert audio.rms(clip.samples) == pytest.approx(0.1, rel=1e-6)


class TestPlanJson:
    def test_roundtrip_with_infinite_snr(self):
        d = {"snr_db": "inf", "noise_source": "white",
             "chain": [{"codec_id": "MP3", "bitrate_kbps": 64.0}], "seed": 9}
        plan = pipeline.plan_from_json(d)
        assert plan.noise.snr_db == float("inf")
        assert pipeline._plan_to_json(plan) == d

    def test_finite_snr_survives(self):
        d = {"snr_db": 12.5, "noise_source": "white", "chain": [], "seed": 1}
        assert pipeline._plan_to_json(pipeline.plan_from_json(d)) == d


class TestGenerateDataset:
    def test_counts_and_fields(self, world):
        manifest, _, out = world
        assert len(manifest["rooms"]) == 6
        # 6 rooms x 4 grid cells x 2 utterances
        assert len(manifest["records"]) == 48
        rec = manifest["records"][0]
        assert rec["index"] == 0
        assert set(rec["labels"]) == {"volume", "absorption", "rt60"}
        for room in manifest["rooms"]:
            assert {"rt60_sabine", "rt60_schroeder", "volume"} <= set(room["labels"])
        on_disk = json.loads((out / "manifest.json").read_text())
        assert on_disk == manifest

    def test_rooms_split_disjointly(self, world):
        manifest, _, _ = world
        split_of = {}
        for rec in manifest["records"]:
            split_of.setdefault(rec["room_id"], set()).add(rec["split"])
        assert all(len(s) == 1 for s in split_of.values())
        seen = {next(iter(s)) for s in split_of.values()}
        assert seen == {"train", "val", "test"}

    def test_generation_deterministic(self, world, tmp_path):
        manifest, _, out = world
        again = pipeline.generate_dataset(micro_config(), tmp_path / "again")
        assert pipeline.canonical_json(again) == pipeline.canonical_json(manifest)
        a = (out / "manifest.json").read_bytes()
        b = (tmp_path / "again" / "manifest.json").read_bytes()
        assert a == b

    def test_clips_rematerialize_bit_exactly(self, tmp_path):
        cfg = micro_config(rooms={"rectangle": 1}, grid={"rows": 1, "cols": 2},
                           speech_per_pair=1, splits={"train": 1.0},
                           write_wavs=True)
        manifest = pipeline.generate_dataset(cfg, tmp_path)
        assert len(manifest["records"]) == 2
        reloaded = json.loads((tmp_path / "manifest.json").read_text())
        for rec in reloaded["records"]:
            saved = audio.load_wav(tmp_path / rec["clip"])
            fresh = pipeline.materialize_record(reloaded, rec["index"])
            np.testing.assert_array_equal(saved.samples.astype(np.float32),
                                          fresh.samples.astype(np.float32))

    def test_stratified_split_interleaves_labels(self, world, tmp_path):
        cfg = micro_config(split_strategy="stratified",
                           splits={"train": 0.5, "test": 0.5})
        manifest = pipeline.generate_dataset(cfg, tmp_path)
        split_of = {r["room_id"]: r["split"] for r in manifest["records"]}
        by_rt = sorted(manifest["rooms"],
                       key=lambda r: r["labels"]["rt60_schroeder"])
        order = [split_of[r["room_id"]] for r in by_rt]
        assert order.count("train") == 3 and order.count("test") == 3
        # interleaved, not blocked: no split owns a 3-room prefix
        assert len(set(order[:3])) > 1

    def test_unknown_split_strategy(self, tmp_path):
        with pytest.raises(ConfigError):
            pipeline.generate_dataset(micro_config(split_strategy="pivot"),
                                      tmp_path)

    def test_absorption_range_draws_within_bounds(self, tmp_path):
        cfg = micro_config(absorption=[0.3, 0.5], rooms={"square": 2},
                           grid={"rows": 1, "cols": 1}, speech_per_pair=1,
                           splits={"train": 1.0})
        manifest = pipeline.generate_dataset(cfg, tmp_path)
        vals = [r["absorption"] for r in manifest["rooms"]]
        assert all(0.3 <= v <= 0.5 for v in vals)
        assert vals[0] != vals[1]

    def test_missing_speech_pool(self, tmp_path):
        cfg = micro_config(speech_pool=str(tmp_path / "nope.json"))
        with pytest.raises(MissingPool):
            pipeline.generate_dataset(cfg, tmp_path / "out")

    def test_rooms_required(self, tmp_path):
        with pytest.raises(ConfigError):
            pipeline.generate_dataset({"seed": 1}, tmp_path)


class TestFeatureStore:
    def test_memo_returns_same_array(self, world):
        _, store, _ = world
        assert store.get(0) is store.get(0)
        assert store.get(0).dtype == np.float32

    def test_batch_shape(self, world):
        _, store, _ = world
        assert store.batch([0, 1, 2]).shape == (3, 96, 276)

    def test_disk_cache_avoids_rematerializing(self, world, tmp_path, monkeypatch):
        manifest, _, _ = world
        warm = pipeline.FeatureStore(manifest, cache_dir=tmp_path)
        ref = warm.get(3)
        monkeypatch.setattr(pipeline, "materialize_record",
                            lambda *a, **k: pytest.fail("cache miss"))
        cold = pipeline.FeatureStore(manifest, cache_dir=tmp_path)
        np.testing.assert_array_equal(cold.get(3), ref)


class TestTrainConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            toy_train_config(reg_target="pressure")
        with pytest.raises(ConfigError):
            toy_train_config(reg_weight=0.0)
        with pytest.raises(ConfigError):
            toy_train_config(val_metric="bleu")
        with pytest.raises(ConfigError):
            toy_train_config(max_epochs=2, patience=5)
        with pytest.raises(ConfigError):
            toy_train_config(n_way=0)

    def test_from_dict_coerces_model(self):
        tc = pipeline.train_config_from_dict(
            {"n_way": 2, "k_shot": 3, "model": {"conv_channels": [4, 8],
                                                "input_shape": [96, 276]},
             "enforce_budget": False})
        assert tc.model.conv_channels == (4, 8)

    def test_from_dict_rejects_unknown_key(self):
        with pytest.raises(ConfigError):
            pipeline.train_config_from_dict({"warmup": 1})


class TestTrain:
    def test_patience_zero_runs_one_epoch(self, world, tmp_path):
        manifest, store, _ = world
        _, log = pipeline.train(manifest, toy_train_config(patience=0, max_epochs=5),
                                tmp_path, store=store)
        assert len(log) == 1

    def test_log_and_checkpoint_artifacts(self, trained):
        ckpt, log, _, _ = trained
        assert Path(ckpt).exists()
        assert {"epoch", "train_loss", "val_accuracy", "val_loss",
                "improved"} <= set(log[0])
        saved = json.loads((Path(ckpt).parent / "train_log.json").read_text())
        assert saved == log

    def test_same_seed_same_checkpoint_bytes(self, world, tmp_path):
        manifest, store, _ = world
        tc = toy_train_config(max_epochs=1, patience=1)
        pa, _ = pipeline.train(manifest, tc, tmp_path / "a", store=store)
        pb, _ = pipeline.train(manifest, tc, tmp_path / "b", store=store)
        assert Path(pa).read_bytes() == Path(pb).read_bytes()

    def test_val_metric_loss_selects_checkpoint(self, world, tmp_path):
        manifest, store, _ = world
        ckpt, log = pipeline.train(
            manifest, toy_train_config(val_metric="loss", max_epochs=1,
                                       patience=1),
            tmp_path, store=store)
        assert Path(ckpt).exists() and log[0]["improved"]

    def test_empty_val_split_raises(self, world, tmp_path):
        manifest, store, _ = world
        with pytest.raises(InsufficientClasses):
            pipeline.train(manifest, toy_train_config(val_split="holdout"),
                           tmp_path, store=store)

    def test_too_few_train_classes(self, world, tmp_path):
        manifest, store, _ = world
        with pytest.raises(InsufficientClasses):
            pipeline.train(manifest, toy_train_config(n_way=7),
                           tmp_path, store=store)


class TestEvaluate:
    def test_closed_protocol(self, trained, tmp_path):
        ckpt, _, manifest, store = trained
        s = pipeline.evaluate(ckpt, manifest, "closed", tmp_path, seed=1,
                              n_way=2, k_shot=3, episodes=4, store=store)
        assert 0.0 <= s["top1"] <= s["top2"] <= 1.0
        assert s["queries"] > 0 and s["n_way"] == 2
        assert (tmp_path / "per_class.csv").exists()
        assert (tmp_path / "summary_closed.json").exists()

    def test_open_protocol(self, trained, tmp_path):
        ckpt, _, manifest, store = trained
        s = pipeline.evaluate(ckpt, manifest, "open", tmp_path, seed=1,
                              n_way=2, k_shot=3, episodes=6, store=store)
        assert 0.0 <= s["auc"] <= 1.0
        assert 0.0 < s["known_fraction"] < 1.0

    def test_positions_protocol(self, trained, tmp_path):
        ckpt, _, manifest, store = trained
        s = pipeline.evaluate(ckpt, manifest, "positions", tmp_path, seed=1,
                              k_shot=3, store=store)
        assert 0.0 <= s["stats"]["overall"] <= 1.0
        assert len(s["map"]) == 2 and len(s["map"][0]) == 2
        assert (tmp_path / "position_map.csv").exists()

    def test_regress_protocols(self, trained, tmp_path):
        ckpt, _, manifest, store = trained
        s = pipeline.evaluate(ckpt, manifest, "regress", tmp_path / "rt",
                              reg_target="rt60", store=store)
        assert s["rmse"] >= 0.0 and s["target_std"] >= 0.0
        v = pipeline.evaluate(ckpt, manifest, "regress", tmp_path / "vol",
                              reg_target="volume_log10", store=store)
        assert set(v["volume_bin_accuracy"]) == {"2", "3", "5", "10"}

    def test_regress_log_rt60_reports_seconds(self, trained, tmp_path):
        ckpt, _, manifest, store = trained
        s = pipeline.evaluate(ckpt, manifest, "regress", tmp_path,
                              reg_target="rt60_log10", store=store)
        raw = [r["labels"]["rt60"] for r in manifest["records"]
               if r["split"] == "test"]
        assert s["target_std_seconds"] == pytest.approx(np.std(raw))
        assert s["rmse_seconds"] >= 0.0

    def test_ksweep_needs_samples_beyond_k(self, trained, tmp_path):
        # 8 records per room cannot support the K=1..15 sweep
        ckpt, _, manifest, store = trained
        with pytest.raises(ProtocolMismatch):
            pipeline.evaluate(ckpt, manifest, "ksweep", tmp_path, store=store)

    def test_unknown_protocol(self, trained, tmp_path):
        ckpt, _, manifest, store = trained
        with pytest.raises(ProtocolMismatch):
            pipeline.evaluate(ckpt, manifest, "blindfold", tmp_path, store=store)

    def test_requires_test_split(self, trained, tmp_path):
        ckpt, _, manifest, store = trained
        trainless = copy.deepcopy(manifest)
        for rec in trainless["records"]:
            rec["split"] = "train"
        with pytest.raises(ProtocolMismatch):
            pipeline.evaluate(ckpt, trainless, "closed", tmp_path, store=store)


class TestSegmentSpeech:
    sr = 16000

    def test_exact_multiple(self, rng):
        x = rng.standard_normal(9 * self.sr)
        segs = pipeline.segment_speech(x, self.sr)
        assert len(segs) == 3
        np.testing.assert_array_equal(np.concatenate(segs), x)

    def test_tail_dropped(self, rng):
        segs = pipeline.segment_speech(rng.standard_normal(int(7.5 * self.sr)),
                                       self.sr)
        assert len(segs) == 2

    def test_short_clip_extended(self, rng):
        x = rng.standard_normal(int(1.7 * self.sr))
        segs = pipeline.segment_speech(x, self.sr)
        assert len(segs) == 1 and segs[0].size == 3 * self.sr
        p = pipeline._lowest_energy_split(x, self.sr)
        np.testing.assert_array_equal(segs[0][p:p + x.size], x)

    def test_split_point_prefers_quiet_region(self):
        x = np.ones(self.sr)
        x[6000:7000] = 1e-4
        assert 6000 <= pipeline._lowest_energy_split(x, self.sr) < 7000


class TestIngest:
    def test_speech_pool(self, tmp_path, rng):
        src = tmp_path / "src"
        src.mkdir()
        audio.save_wav(src / "long.wav",
                       AudioClip(16000, 0.1 * rng.standard_normal(7 * 16000)))
        audio.save_wav(src / "short.wav",
                       AudioClip(16000, 0.1 * rng.standard_normal(16000)))
        pool = pipeline.ingest_corpus(src, "speech", tmp_path / "pool")
        assert pool["kind"] == "speech" and len(pool["items"]) == 3
        for item in pool["items"]:
            seg = audio.load_wav(item["path"])
            assert seg.samples.size == 48000
        on_disk = json.loads((tmp_path / "pool" / "pool.json").read_text())
        assert on_disk == pool

    def test_air_pool_reads_sidecars(self, tmp_path, rng):
        src = tmp_path / "airs"
        src.mkdir()
        audio.save_wav(src / "a.wav", AudioClip(16000, rng.standard_normal(800)))
        (src / "a.json").write_text(json.dumps({"rt60": 0.4}))
        pool = pipeline.ingest_corpus(src, "air", tmp_path / "pool")
        assert pool["items"][0]["labels"] == {"rt60": 0.4}

    def test_bad_sidecar(self, tmp_path, rng):
        src = tmp_path / "airs"
        src.mkdir()
        audio.save_wav(src / "a.wav", AudioClip(16000, rng.standard_normal(800)))
        (src / "a.json").write_text("{not json")
        with pytest.raises(UnreadableFile):
            pipeline.ingest_corpus(src, "air", tmp_path / "pool")

    def test_empty_directory(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(EmptyDirectory):
            pipeline.ingest_corpus(tmp_path / "empty", "speech", tmp_path / "p")

    def test_unknown_kind(self, tmp_path):
        with pytest.raises(ConfigError):
            pipeline.ingest_corpus(tmp_path, "music", tmp_path / "p")


class TestSimulateRooms:
    def test_exports_airs_and_sidecars(self, tmp_path):
        cfg = {"seed": 4, "rooms": {"square": 1}, "absorption": 0.7,
               "grid": {"rows": 1, "cols": 2}}
        index = pipeline.simulate_rooms(cfg, tmp_path)
        assert len(index["items"]) == 2
        for item in index["items"]:
            assert (tmp_path / item["path"]).exists()
            meta = json.loads(
                (tmp_path / item["path"]).with_suffix(".json").read_text())
            assert {"rt60_sabine", "rt60_schroeder"} <= set(meta["labels"])
        assert (tmp_path / "airs.json").exists()


class TestMergeReports:
    def test_collects_nested_summaries(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "a" / "summary_closed.json").write_text('{"top1": 0.5}')
        (tmp_path / "summary_open.json").write_text('{"auc": 0.9}')
        merged = pipeline.merge_reports(tmp_path)
        assert merged["a/summary_closed.json"] == {"top1": 0.5}
        assert merged["summary_open.json"] == {"auc": 0.9}

    def test_empty_tree(self, tmp_path):
        with pytest.raises(EmptyDirectory):
            pipeline.merge_reports(tmp_path)


class TestCli:
    def test_missing_config_file_is_config_error(self, tmp_path):
        code = cli.main(["generate", "--config", str(tmp_path / "none.json"),
                         "--out", str(tmp_path / "o")])
        assert code == cli.EXIT_CONFIG

    def test_config_without_rooms(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text("{}")
        code = cli.main(["generate", "--config", str(cfg),
                         "--out", str(tmp_path / "o")])
        assert code == cli.EXIT_CONFIG

    def test_ingest_empty_dir_is_data_error(self, tmp_path):
        (tmp_path / "empty").mkdir()
        code = cli.main(["ingest", str(tmp_path / "empty"), "--kind", "speech",
                         "--out", str(tmp_path / "o")])
        assert code == cli.EXIT_DATA

    def test_external_codec_without_bridge(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({
            "seed": 2, "rooms": {"square": 1}, "absorption": 0.7,
            "grid": {"rows": 1, "cols": 1}, "speech_per_pair": 1,
            "splits": {"train": 1.0},
            "profile": {"codecs": [["EXTERNAL", [64.0]]],
                        "chain_lengths": [1], "p_infinite": 1.0}}))
        code = cli.main(["generate", "--config", str(cfg),
                         "--out", str(tmp_path / "o")])
        assert code == cli.EXIT_MISSING_TOOL

    def test_evaluate_rejects_garbage_checkpoint(self, tmp_path):
        bogus = tmp_path / "model.ck"
        bogus.write_bytes(b"RIFFxxxxWAVE")
        man = tmp_path / "m.json"
        man.write_text("{}")
        code = cli.main(["evaluate", str(bogus), str(man),
                         "--protocol", "closed", "--out", str(tmp_path / "o")])
        assert code == cli.EXIT_DATA
        missing = cli.main(["evaluate", str(tmp_path / "ghost.ck"), str(man),
                            "--protocol", "closed", "--out", str(tmp_path / "o")])
        assert missing == cli.EXIT_DATA

    def test_report_roundtrip(self, tmp_path, capsys):
        (tmp_path / "summary_closed.json").write_text('{"top1": 1.0}')
        code = cli.main(["report", str(tmp_path),
                         "--out", str(tmp_path / "merged.json")])
        assert code == cli.EXIT_OK
        merged = json.loads((tmp_path / "merged.json").read_text())
        assert merged["summary_closed.json"] == {"top1": 1.0}
        empty = cli.main(["report", str(tmp_path / "nothing")])
        assert empty == cli.EXIT_DATA
