import json
import math
import struct

import numpy as np
import pytest

from elacnn.dataset import ElaCache, scan_directory
from elacnn.ela import ElaConfig
from elacnn.errors import (ArchitectureMismatchError, ArchiveError, BadMagicError, ContractError,
                           TrainingInterrupted, TruncatedArchiveError)
from elacnn.layers import build_model, build_paper_model
from elacnn.training import (MAGIC, ArraySource, EpochRecord, MetricsHistory, TrainConfig,
                             evaluate, export_history, fit, load_model, parameter_digest,
                             plot_history, predict, read_header, read_history, save_model, train)

from helpers import make_tree

SHAPE = (16, 16, 3)
SMALL_ELA = ElaConfig(target_width=16, target_height=16)


def tiny(seed=0):
    return build_model(seed, input_shape=SHAPE, filters=4, hidden=8)


def toy_data(n=12, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random((n,) + SHAPE, dtype=np.float32)
    labels = np.arange(n) % 2
    x[labels == 1, :8, :8] += 0.5
    y = np.eye(2, dtype=np.float32)[labels]
    return ArraySource(x, y)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [{"epochs": 0}, {"batch_size": 0}, {"lr": 0},
                                        {"split_ratio": 1.0}, {"split_ratio": 0}])
    def test_rejects(self, kwargs):
        with pytest.raises(ContractError):
            TrainConfig(**kwargs)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.epochs, cfg.batch_size, cfg.lr) == (50, 32, 1e-3)
        assert (cfg.seed, cfg.split_ratio) == (42, 0.8)
        assert (cfg.beta1, cfg.beta2, cfg.epsilon) == (0.9, 0.999, 1e-8)

    def test_presets(self):
        a, b = TrainConfig.preset(50), TrainConfig.preset(100)
        assert (a.epochs, b.epochs) == (50, 100) and a.seed != b.seed
        assert TrainConfig.preset(100, seed=7).seed == 7
        with pytest.raises(ContractError):
            TrainConfig.preset(75)

    def test_digest_tracks_content(self):
        assert TrainConfig().digest() == TrainConfig().digest()
        assert TrainConfig().digest() != TrainConfig(seed=1).digest()
        assert json.loads(json.dumps(TrainConfig().to_dict()))["ela"]["jpeg_quality"] == 90


class TestFit:
    def test_deterministic(self):
        cfg = TrainConfig(epochs=3, batch_size=4, seed=5, ela=SMALL_ELA)
        runs = []
        for _ in range(2):
            m = tiny(5)
            h = fit(m, toy_data(), range(8), range(8, 12), cfg)
            runs.append((parameter_digest(m), [tuple(r.__dict__.values()) for r in h]))
        assert runs[0] == runs[1]

    def test_history_shape(self):
        h = fit(tiny(), toy_data(), range(8), range(8, 12), TrainConfig(epochs=4, batch_size=3))
        assert [r.epoch for r in h] == [1, 2, 3, 4]
        assert all(0 <= r.train_acc <= 1 and r.val_loss >= 0 for r in h)

    def test_no_validation(self):
        h = fit(tiny(), toy_data(), range(12), [], TrainConfig(epochs=1, batch_size=4))
        assert math.isnan(h[0].val_loss) and math.isnan(h[0].val_acc)

    def test_learns_toy_problem(self):
        m = tiny(1)
        h = fit(m, toy_data(), range(12), [], TrainConfig(epochs=40, batch_size=4, seed=1))
        assert h[-1].train_loss < h[0].train_loss and h[-1].train_acc == 1.0

    def test_empty_training_set(self):
        with pytest.raises(ContractError):
            fit(tiny(), toy_data(), [], [0], TrainConfig(epochs=1))

    def test_checkpoint_written(self, tmp_path):
        seen = []
        fit(tiny(), toy_data(), range(8), range(8, 12), TrainConfig(epochs=2, batch_size=4),
            checkpoint=tmp_path / "best.elacnn", on_epoch=seen.append)
        assert (tmp_path / "best.elacnn").exists() and len(seen) == 2
        load_model(tmp_path / "best.elacnn")

    def test_interrupt_keeps_history(self):
        def stop(record):
            if record.epoch == 2:
                raise KeyboardInterrupt

        with pytest.raises(TrainingInterrupted) as info:
            fit(tiny(), toy_data(), range(8), range(8, 12), TrainConfig(epochs=5, batch_size=4),
                on_epoch=stop)
        assert [r.epoch for r in info.value.history] == [1, 2]


class TestEvaluate:
    def test_does_not_touch_parameters(self):
        m = tiny()
        before = parameter_digest(m)
        loss, acc = evaluate(m, toy_data(), range(12), batch_size=5)
        assert parameter_digest(m) == before and loss > 0 and 0 <= acc <= 1

    def test_batch_size_independent(self):
        m, src = tiny(), toy_data()
        a = evaluate(m, src, range(12), batch_size=1)
        b = evaluate(m, src, range(12), batch_size=12)
        assert a[1] == b[1] and a[0] == pytest.approx(b[0], rel=1e-6)

    def test_empty(self):
        with pytest.raises(ContractError):
            evaluate(tiny(), toy_data(), [])

    def test_untrained_near_chance(self):
        src = toy_data(100, seed=3)
        _, acc = evaluate(tiny(7), src, range(100))
        assert 0.3 <= acc <= 0.7


class TestManifestTraining:
    def test_train_end_to_end(self, tmp_path):
        root = make_tree(tmp_path / "data", 6, 6, size=20)
        cfg = TrainConfig(epochs=2, batch_size=4, ela=SMALL_ELA)
        model, history, split = train(tiny(), scan_directory(root), cfg, ElaCache(tmp_path / "c"))
        assert len(history) == 2 and len(split.train) == 10 and len(split.val) == 2

    def test_predict(self, tmp_path):
        root = make_tree(tmp_path, 1, 1, size=20)
        m = tiny()
        a = predict(m, root / "Tp" / "tp_000.png", SMALL_ELA)
        b = predict(m, root / "Tp" / "tp_000.png", SMALL_ELA)
        assert a == b
        assert a.p_authentic + a.p_tampered == pytest.approx(1.0, abs=1e-6)
        assert a.label == ("authentic" if a.p_authentic >= a.p_tampered else "tampered")
        assert set(a.to_dict()) == {"authentic", "tampered", "label"}

    def test_predict_tie_is_authentic(self, tmp_path):
        root = make_tree(tmp_path, 1, 1, size=20)
        m = tiny()
        m.layers[-2].weight[...] = 0
        assert predict(m, root / "Au" / "au_000.png", SMALL_ELA).label == "authentic"


class TestHistoryCsv:
    def history(self, n):
        return [EpochRecord(e, 1 / e, e / (n + 1), 2 / e, 0.5) for e in range(1, n + 1)]

    def test_layout(self, tmp_path):
        export_history(self.history(50), tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert len(lines) == 51
        assert lines[0] == "epoch,train_loss,train_acc,val_loss,val_acc"
        assert lines[1] == "1,1.000000,0.019608,2.000000,0.500000"

    def test_reexport_identical(self, tmp_path):
        export_history(self.history(7), tmp_path / "a.csv")
        export_history(read_history(tmp_path / "a.csv"), tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_nan_written(self, tmp_path):
        export_history([EpochRecord(1, 0.5, 1.0, math.nan, math.nan)], tmp_path / "h.csv")
        assert (tmp_path / "h.csv").read_text().splitlines()[1] == "1,0.500000,1.000000,nan,nan"

    def test_empty(self, tmp_path):
        with pytest.raises(ContractError):
            export_history([], tmp_path / "h.csv")

    def test_epochs_in_order(self):
        h = MetricsHistory()
        h.append(EpochRecord(1, 0, 0, 0, 0))
        with pytest.raises(ContractError):
            h.append(EpochRecord(3, 0, 0, 0, 0))
        assert h.column("epoch") == [1]

    def test_plot(self, tmp_path):
        pytest.importorskip("matplotlib")
        plot_history(self.history(5), tmp_path / "h.png")
        assert (tmp_path / "h.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


class TestArchive:
    def test_round_trip_bytes(self, tmp_path):
        m = tiny(3)
        save_model(m, tmp_path / "a.elacnn", TrainConfig(seed=3, ela=SMALL_ELA))
        loaded = load_model(tmp_path / "a.elacnn")
        save_model(loaded, tmp_path / "b.elacnn", TrainConfig(seed=3, ela=SMALL_ELA))
        assert (tmp_path / "a.elacnn").read_bytes() == (tmp_path / "b.elacnn").read_bytes()
        for p, q in zip(m.parameters(), loaded.parameters()):
            assert p.tobytes() == q.tobytes()

    def test_loaded_model_predicts_identically(self, tmp_path):
        m = tiny(3)
        save_model(m, tmp_path / "a.elacnn")
        x = np.random.default_rng(0).random((2,) + SHAPE, dtype=np.float32)
        assert m.forward(x).tobytes() == load_model(tmp_path / "a.elacnn").forward(x).tobytes()

    def test_paper_model_size(self, tmp_path):
        save_model(build_paper_model(0), tmp_path / "p.elacnn")
        h = read_header(tmp_path / "p.elacnn")
        hlen = struct.unpack_from("<I", (tmp_path / "p.elacnn").read_bytes(), 8)[0]
        assert (tmp_path / "p.elacnn").stat().st_size == 8 + 4 + hlen + 4 * 29_520_034
        assert h["input_shape"] == [128, 128, 3] and h["format_version"] == 1

    def test_header_fields(self, tmp_path):
        cfg = TrainConfig(seed=9, split_ratio=0.75, ela=SMALL_ELA)
        save_model(tiny(9), tmp_path / "a.elacnn", cfg)
        h = read_header(tmp_path / "a.elacnn")
        assert h["seed"] == 9 and h["split_ratio"] == 0.75
        assert h["created_from_config_digest"] == cfg.digest()
        assert h["ela"] == SMALL_ELA.to_dict()
        assert [layer["kind"] for layer in h["layers"]][:3] == ["conv2d", "relu", "conv2d"]

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOTMAGIC" + b"\0" * 40)
        with pytest.raises(BadMagicError):
            load_model(tmp_path / "x")

    @pytest.mark.parametrize("cut", [3, 10, 20, -1])
    def test_truncated(self, tmp_path, cut):
        save_model(tiny(), tmp_path / "a.elacnn")
        raw = (tmp_path / "a.elacnn").read_bytes()
        (tmp_path / "b").write_bytes(raw[:cut])
        with pytest.raises(TruncatedArchiveError):
            load_model(tmp_path / "b")

    def test_trailing_bytes(self, tmp_path):
        save_model(tiny(), tmp_path / "a.elacnn")
        with open(tmp_path / "a.elacnn", "ab") as fh:
            fh.write(b"\0\0\0\0")
        with pytest.raises(ArchiveError):
            load_model(tmp_path / "a.elacnn")

    def _rewrite_header(self, path, edit):
        raw = path.read_bytes()
        hlen = struct.unpack_from("<I", raw, 8)[0]
        header = json.loads(raw[12:12 + hlen])
        edit(header)
        new = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        path.write_bytes(MAGIC + struct.pack("<I", len(new)) + new + raw[12 + hlen:])

    def test_architecture_mismatch(self, tmp_path):
        save_model(tiny(), tmp_path / "a.elacnn")

        def edit(h):
            h["layers"][2]["shape"][2] = 5
        self._rewrite_header(tmp_path / "a.elacnn", edit)
        with pytest.raises(ArchitectureMismatchError):
            load_model(tmp_path / "a.elacnn")

    def test_widths_follow_header(self, tmp_path):
        m = build_model(0, input_shape=(20, 20, 3), filters=3, kernel_size=3, hidden=5)
        save_model(m, tmp_path / "a.elacnn")
        loaded = load_model(tmp_path / "a.elacnn")
        assert loaded.describe() == m.describe() and loaded.input_shape == (20, 20, 3)

    def test_bad_input_shape(self, tmp_path):
        save_model(tiny(), tmp_path / "a.elacnn")
        self._rewrite_header(tmp_path / "a.elacnn", lambda h: h.update(input_shape=[2, 2, 3]))
        with pytest.raises(ArchitectureMismatchError):
            load_model(tmp_path / "a.elacnn")

    def test_unknown_version(self, tmp_path):
        save_model(tiny(), tmp_path / "a.elacnn")
        self._rewrite_header(tmp_path / "a.elacnn", lambda h: h.update(format_version=2))
        with pytest.raises(ArchiveError):
            load_model(tmp_path / "a.elacnn")

    def test_no_temp_files_left(self, tmp_path):
        save_model(tiny(), tmp_path / "a.elacnn")
        assert [p.name for p in tmp_path.iterdir()] == ["a.elacnn"]
