"""Tests for run-level experiments: filter import, records, dumps and learning trends."""

import numpy as np
import pytest

from relward.core.audio import synthesize_dataset, write_manifest
from relward.core.errors import ArgumentError
from relward.core.experiments import (
    describe_checkpoint,
    import_filters,
    learning_trend,
    record_path,
    spectrogram_csv,
    train_run,
    transfer_experiment,
)
from relward.core.filterbank import export_filters, synthesize_kernels
from relward.core.model import VARIANTS, init_model, save_checkpoint, tiny_config
from relward.core.settings import RunSettings

from .conftest import tiny_blocks, write_tiny_config


class TestImportFilters:
    """Test replacing a model's centers with an exported filter file."""

    def test_sinc_reordered_centers_keep_positive_widths(self, tmp_path):
        """Test that crossed neighbours keep the band widths fixed at init."""
        trained = init_model(tiny_config(), "Sinc", 0)
        mu = trained.params["fb.mu"]
        mu[3], mu[4] = mu[4], mu[3]
        path = export_filters(trained.fb, tmp_path / "fb.txt")

        fresh = init_model(tiny_config(), "Sinc", 1)
        widths = fresh.buffers["fb.bandwidth"].copy()
        import_filters(fresh, path)

        np.testing.assert_array_equal(fresh.params["fb.mu"], mu)
        np.testing.assert_array_equal(fresh.buffers["fb.bandwidth"], widths)
        assert np.all(fresh.buffers["fb.bandwidth"] > 0)
        kernels = synthesize_kernels(fresh.fb).kernels
        assert np.all(np.isfinite(kernels))

    def test_cosine_family_has_no_widths(self, tmp_path):
        """Test that the Gaussian family imports centers only."""
        source = init_model(tiny_config(), "A", 0)
        source.params["fb.mu"][0] = 0.2
        model = import_filters(init_model(tiny_config(), "A", 1), export_filters(source.fb, tmp_path / "fb.txt"))
        assert model.params["fb.mu"][0] == 0.2
        assert "fb.bandwidth" not in model.buffers


class TestRecords:
    """Test the reproducibility records of commands without a run directory."""

    def test_record_path_sits_beside_the_artifact(self, tmp_path):
        """Test the <stem>.config.txt naming."""
        assert record_path(tmp_path / "eval.csv") == tmp_path / "eval.config.txt"
        assert record_path("fb.txt").name == "fb.config.txt"

    def test_describe_checkpoint(self, tmp_path):
        """Test that the record carries the checkpoint's model section, variant and path."""
        model = init_model(tiny_config(), "MFB-R", 0)
        path = save_checkpoint(model, tmp_path / "run" / "checkpoint.json", 0)
        settings = describe_checkpoint(RunSettings(), model, tmp_path / "run")
        assert settings.get("model.f") == 8
        assert settings.get("train.variant") == "MFB-R"
        assert settings.get("run.checkpoint") == str(path.resolve())


class TestSpectrogramDump:
    """Test the per-input x_raw and z dump."""

    @staticmethod
    def parse(text):
        stages = {}
        for line in text.splitlines()[1:]:
            input_id, stage, i, frame, value = line.split(",")
            stages.setdefault((int(input_id), stage), {})[(int(i), int(frame))] = float(value)
        return stages

    def test_layout(self):
        """Test the header and one row per filter and frame of each stage."""
        blocks, _ = tiny_blocks(2)
        text = spectrogram_csv(init_model(tiny_config(), "A-R,M-R", 0), blocks)
        lines = text.splitlines()
        assert lines[0] == "input_id,stage,filter,frame,value"
        assert len(lines) == 1 + 2 * (8 * 11 + 8 * 5)
        frames = {int(line.split(",")[3]) for line in lines[1:] if line.split(",")[1] == "z"}
        assert frames == {3, 4, 5, 6, 7}

    def test_z_is_normalized_x(self):
        """Test that without acoustic relevance z is the row-standardized x over all frames."""
        blocks, _ = tiny_blocks(1)
        model = init_model(tiny_config(), "A", 0)
        stages = self.parse(spectrogram_csv(model, blocks))
        x = np.array([[stages[(0, "x_raw")][(i, t)] for t in range(11)] for i in range(8)])
        z = np.array([[stages[(0, "z")][(i, t)] for t in range(3, 8)] for i in range(8)])
        expected = (x - x.mean(axis=1, keepdims=True)) / np.sqrt(x.var(axis=1, keepdims=True) + 1e-4)
        np.testing.assert_allclose(z, expected[:, 3:8], atol=1e-12)


class TestLearningTrend:
    """Test the variant-by-seed accuracy table."""

    def test_table_and_artifacts(self, tmp_path, tiny_dataset):
        """Test one row per (variant, seed) and the written files."""
        settings = RunSettings(write_tiny_config(tmp_path / "tiny.txt", **{"train.epochs": 1, "train.batch": 6}))
        settings.set("data.train", str(tiny_dataset))
        table = learning_trend(settings, tmp_path / "trend", ["A", "MFB"], [0, 1])

        assert [(row.variant, row.seed) for row in table.rows] == [("A", 0), ("A", 1), ("MFB", 0), ("MFB", 1)]
        assert table.variants() == ["A", "MFB"]
        for row in table.rows:
            assert 0.0 <= row.clean <= 1.0 and 0.0 <= row.noisy <= 1.0
        lines = (tmp_path / "trend" / "trend.csv").read_text().splitlines()
        assert lines[0] == "variant,seed,clean,10dB"
        assert len(lines) == 5
        summary = (tmp_path / "trend" / "trend_summary.csv").read_text().splitlines()
        assert summary[0] == "variant,min_clean,median_10dB"
        assert (tmp_path / "trend" / "config.txt").is_file()

    def test_same_seed_same_row(self, tmp_path, tiny_dataset):
        """Test that a repeated seed reproduces its accuracies."""
        settings = RunSettings(write_tiny_config(tmp_path / "tiny.txt", **{"train.epochs": 1, "train.batch": 6}))
        settings.set("data.train", str(tiny_dataset))
        table = learning_trend(settings, tmp_path / "trend", ["A-R"], [3, 3])
        assert table.rows[0] == table.rows[1]

    def test_needs_variants_and_seeds(self, tmp_path, tiny_dataset):
        """Test that an empty sweep is rejected."""
        settings = RunSettings()
        settings.set("data.train", str(tiny_dataset))
        with pytest.raises(ArgumentError):
            learning_trend(settings, tmp_path, [], [0])


DESK_MODEL = dict(
    f=40,
    k=129,
    frame_len=400,
    hop=160,
    frames=31,
    keep=11,
    acoustic_hidden=32,
    mod_hidden=16,
    mod_maps=12,
    mod_kf=5,
    mod_kt=5,
    head_maps=8,
    head_fc1=64,
    head_fc2=32,
    classes=4,
)


@pytest.fixture(scope="module")
def desk_task(tmp_path_factory):
    """Reduced synthetic task: 4 classes, clean plus 10 dB training copies, separate clean eval clips."""
    root = tmp_path_factory.mktemp("desk")
    train = synthesize_dataset(root / "train", 64, seed=11, num_classes=4, snrs=[10.0])
    held_out = synthesize_dataset(root / "eval", 64, seed=12, num_classes=4)
    settings = RunSettings()
    for key, value in DESK_MODEL.items():
        settings.set(f"model.{key}", value)
    settings.apply_overrides(
        {
            "data.train": str(write_manifest(root / "train" / "manifest.tsv", train)),
            "data.eval": str(write_manifest(root / "eval" / "manifest.tsv", held_out)),
            "train.epochs": 20,
            "train.batch": 16,
            "train.lr": 2e-3,
        }
    )
    return root, settings.save(root / "desk.txt")


@pytest.mark.slow
class TestDeskScaleLearning:
    """Learning and transfer trends on the reduced synthetic task."""

    def test_every_variant_learns_the_clean_task(self, desk_task):
        """Test that each variant clears 80% clean accuracy on held-out clips."""
        root, config = desk_task
        table = learning_trend(RunSettings(config), root / "all", list(VARIANTS), [0])
        for variant in VARIANTS:
            assert table.min_clean(variant) > 0.8, variant

    def test_relevance_not_worse_under_noise(self, desk_task):
        """Test that A-R,M-R matches or beats A at 10 dB, median over five seeds."""
        root, config = desk_task
        table = learning_trend(RunSettings(config), root / "seeds", ["A", "A-R,M-R"], range(5))
        assert table.median_noisy("A-R,M-R") >= table.median_noisy("A")

    def test_frozen_imported_filters_match_scratch(self, desk_task):
        """Test that frozen filters from a run on the same data land within two points of from-scratch."""
        root, config = desk_task
        settings = RunSettings(config)
        train_run(settings, root / "source")
        settings.set("train.freeze_filters", True)
        table = transfer_experiment(root / "source", settings, root / "transfer")
        assert abs(table.lookup("source", "target") - table.lookup("target", "target")) <= 0.02
