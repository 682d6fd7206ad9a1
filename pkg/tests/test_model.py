"""Model assembly: depth tables, shape contracts, checkpoints, freezing."""

import numpy as np
import pytest

from aggpose.checkpoint import (
    load_into_model,
    read_checkpoint,
    save_model,
    write_checkpoint,
)
from aggpose.errors import CheckpointError, ConfigError, ShapeError
from aggpose.model import (
    AggPose,
    ModelConfig,
    aggpose_l,
    aggpose_micro,
    aggpose_s,
    aggpose_t,
    config_from_dict,
    load_config,
    save_config,
)
from aggpose.tensor import Tensor, no_grad


class TestConfigs:
    def test_large_depth_table(self):
        cfg = aggpose_l()
        assert cfg.depths == ((3, 3, 3, 3), (6, 3, 3), (40, 3), (3,))
        stages = cfg.stage_specs()
        assert [s.depths for s in stages] == [(3,), (3, 6), (3, 3, 40), (3, 3, 3, 3)]

    def test_small_depth_table(self):
        cfg = aggpose_s()
        assert cfg.depths == ((3, 3, 3, 3), (4, 3, 3), (6, 3), (3,))

    def test_channels_must_increase(self):
        with pytest.raises(ConfigError):
            ModelConfig(
                variant="bad",
                channels=(8, 8),
                depths=((1, 1), (1,)),
                heads=(1, 1),
                gamma=(1, 1),
                expansion=(1, 1),
                num_keypoints=3,
                input_size=(64, 48),
            )

    def test_input_divisibility(self):
        with pytest.raises(ConfigError):
            aggpose_t(input_size=(60, 44))
        with pytest.raises(ConfigError):
            aggpose_l(input_size=(250, 192))

    def test_ragged_depth_table_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(
                variant="bad",
                channels=(8, 16),
                depths=((1,), (1,)),
                heads=(1, 1),
                gamma=(1, 1),
                expansion=(1, 1),
                num_keypoints=3,
                input_size=(64, 48),
            )

    def test_config_file_roundtrip(self, tmp_path):
        cfg = aggpose_t()
        path = tmp_path / "cfg.json"
        save_config(cfg, path)
        assert load_config(path) == cfg

    def test_unknown_key_rejected(self):
        raw = aggpose_t().to_dict()
        raw["bogus"] = 1
        with pytest.raises(ConfigError):
            config_from_dict(raw)


class TestBuildAndForward:
    def test_toy_parameter_budget(self):
        model = AggPose(aggpose_t())
        count = model.parameter_count()
        assert count < 60_000
        # the manifest covers every parameter exactly once
        names = [n for n, _ in model.named_parameters()]
        assert len(names) == len(set(names))
        assert sum(p.size for _, p in model.named_parameters()) == count

    def test_micro_parameter_budget(self):
        assert AggPose(aggpose_micro()).parameter_count() <= 5_000

    def test_toy_forward_shapes(self, rng):
        model = AggPose(aggpose_t(), dtype=np.float64)
        x = Tensor(rng.uniform(-1, 1, size=(1, 3, 64, 48)))
        with no_grad():
            out = model(x)
            levels = model.pyramid(x)
        assert out.shape == (1, 21, 16, 12)
        assert [lv.shape for lv in levels] == [(1, 8, 16, 12), (1, 16, 8, 6)]

    def test_forward_deterministic_and_batch_consistent(self, rng):
        model = AggPose(aggpose_t(), dtype=np.float64)
        img = rng.uniform(-1, 1, size=(1, 3, 64, 48))
        pair = Tensor(np.concatenate([img, img]))
        with no_grad():
            out = model(pair).data
            again = model(pair).data
        assert np.array_equal(out[0], out[1])
        assert out.tobytes() == again.tobytes()

    def test_wrong_input_shape_rejected(self, rng):
        model = AggPose(aggpose_t(), dtype=np.float64)
        with pytest.raises(ShapeError):
            with no_grad():
                model(Tensor(rng.uniform(size=(1, 3, 48, 64))))

    def test_build_deterministic(self):
        a = AggPose(aggpose_t(), init_seed=5)
        b = AggPose(aggpose_t(), init_seed=5)
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert pa.data.tobytes() == pb.data.tobytes()

    def test_batch_permutation_equivariance(self, rng):
        model = AggPose(aggpose_t(), init_seed=3, dtype=np.float64)
        # nonzero head so the permutation test sees non-flat maps
        model.head_weight.data = rng.uniform(-0.1, 0.1, size=model.head_weight.shape)
        x = rng.uniform(-1, 1, size=(3, 3, 64, 48))
        perm = [2, 0, 1]
        with no_grad():
            out = model(Tensor(x)).data
            out_perm = model(Tensor(x[perm])).data
        assert np.array_equal(out_perm, out[perm])


class TestCheckpoint:
    def test_roundtrip_preserves_forward_bitwise(self, tmp_path, rng):
        model = AggPose(aggpose_t(), init_seed=2, dtype=np.float32)
        x = Tensor(rng.uniform(-1, 1, size=(1, 3, 64, 48)).astype(np.float32))
        with no_grad():
            before = model(x).data.copy()
        path = tmp_path / "model.ckpt"
        save_model(path, model)
        other = AggPose(aggpose_t(), init_seed=99, dtype=np.float32)
        report = load_into_model(other, str(path), policy="strict")
        assert report.complete
        with no_grad():
            after = other(x).data
        assert before.tobytes() == after.tobytes()

    def test_by_prefix_reports_exact_misses(self, tmp_path):
        model = AggPose(aggpose_t(), init_seed=0)
        stem_only = {
            "param/" + name: p.data
            for name, p in model.named_parameters()
            if name.startswith("stem.")
        }
        path = tmp_path / "stem.ckpt"
        write_checkpoint(path, stem_only, {})
        fresh = AggPose(aggpose_t(), init_seed=1)
        report = load_into_model(fresh, str(path), policy="by-prefix")
        expected_missing = {
            name for name, _ in fresh.named_parameters() if not name.startswith("stem.")
        }
        assert set(report.missing) == expected_missing
        assert not report.unexpected

    def test_strict_rejects_misses(self, tmp_path):
        model = AggPose(aggpose_t(), init_seed=0)
        partial = dict(list({"param/" + n: p.data for n, p in model.named_parameters()}.items())[:3])
        path = tmp_path / "partial.ckpt"
        write_checkpoint(path, partial, {})
        with pytest.raises(CheckpointError):
            load_into_model(AggPose(aggpose_t()), str(path), policy="strict")

    def test_shape_conflict_rejected(self, tmp_path):
        model = AggPose(aggpose_t(), init_seed=0)
        arrays = {"param/" + n: p.data for n, p in model.named_parameters()}
        first = next(iter(arrays))
        arrays[first] = np.zeros((1, 2, 3))
        path = tmp_path / "bad.ckpt"
        write_checkpoint(path, arrays, {})
        with pytest.raises(CheckpointError, match="shape conflict"):
            load_into_model(AggPose(aggpose_t()), str(path), policy="by-prefix")

    def test_magic_validated(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            read_checkpoint(path)

    def test_metadata_carries_config(self, tmp_path):
        model = AggPose(aggpose_t())
        path = tmp_path / "m.ckpt"
        save_model(path, model, metadata={"step": 12})
        ckpt = read_checkpoint(path)
        assert ckpt.metadata["step"] == 12
        assert config_from_dict(ckpt.metadata["config"]) == model.cfg


class TestFreezing:
    def test_level_tags_cover_all_params(self):
        model = AggPose(aggpose_t())
        tags = model.param_levels()
        assert set(tags) == {n for n, _ in model.named_parameters()}
        assert set(tags.values()) <= {0, 1, 2}

    def test_per_level_frozen_policy(self, tmp_path):
        model = AggPose(aggpose_t(), init_seed=3)
        path = tmp_path / "m.ckpt"
        save_model(path, model)
        fresh = AggPose(aggpose_t(), init_seed=4)
        load_into_model(fresh, str(path), policy="per-level-frozen", freeze_levels=[1])
        tags = fresh.param_levels()
        for name, p in fresh.named_parameters():
            assert p.trainable == (tags[name] != 1)

    def test_frozen_level_unchanged_after_step(self, rng):
        from aggpose.optim import AdamW
        from aggpose.tensor import Tape
        from aggpose.train import heatmap_loss

        model = AggPose(aggpose_t(), init_seed=0, dtype=np.float32)
        model.freeze_levels([1])
        frozen_before = {
            n: p.data.copy()
            for n, p in model.named_parameters()
            if not p.trainable
        }
        assert frozen_before
        opt = AdamW(list(model.named_parameters()), lr=1e-2, weight_decay=0.1)
        x = Tensor(rng.uniform(-1, 1, size=(2, 3, 64, 48)).astype(np.float32))
        target = Tensor(rng.uniform(0, 1, size=(2, 21, 16, 12)).astype(np.float32))
        weight = Tensor(np.ones((2, 21), dtype=np.float32))
        for _ in range(3):
            opt.zero_grad()
            with Tape() as tape:
                loss = heatmap_loss(model(x), target, weight)
                tape.backward(loss)
            opt.step()
        for n, p in model.named_parameters():
            if n in frozen_before:
                assert p.data.tobytes() == frozen_before[n].tobytes()
