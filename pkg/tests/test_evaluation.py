"""ICC(3,1) against an independent ANOVA oracle, plus protocol plumbing."""

import numpy as np
import pytest

from aulatent.evaluation import (ABLATION_VARIANTS, MetricsReport, _variant_config,
                                 ablation_rows_to_csv, icc31)


def anova_oracle_icc31(x, y):
    """Independent two-way ANOVA mean squares, subtraction decomposition."""
    data = np.stack([np.asarray(x, float), np.asarray(y, float)], axis=1)
    n, k = data.shape
    grand = data.mean()
    ss_total = ((data - grand) ** 2).sum()
    row_means = data.mean(axis=1)
    col_means = data.mean(axis=0)
    ss_rows = k * ((row_means - grand) ** 2).sum()
    ss_cols = n * ((col_means - grand) ** 2).sum()
    ss_err = ss_total - ss_rows - ss_cols
    bms = ss_rows / (n - 1)
    ems = ss_err / ((n - 1) * (k - 1))
    return (bms - ems) / (bms + (k - 1) * ems)


class TestIcc31:
    def test_identical_nonconstant_exactly_one(self, rng):
        for _ in range(20):
            x = rng.normal(size=rng.integers(2, 40))
            assert icc31(x, x.copy()) == 1.0

    def test_matches_anova_oracle_100_cases(self, rng):
        for _ in range(100):
            n = int(rng.integers(2, 60))
            x = rng.normal(size=n) * rng.uniform(0.1, 10)
            y = x + rng.normal(size=n) * rng.uniform(0.01, 5)
            assert abs(icc31(x, y) - anova_oracle_icc31(x, y)) <= 1e-10

    def test_reversal_case_against_oracle(self):
        x = np.array([0.0, 1.0, 2.0, 3.0])
        y = x[::-1].copy()
        assert icc31(x, y) == pytest.approx(anova_oracle_icc31(x, y), abs=1e-12)
        assert icc31(x, y) < 0  # anti-consistent raters

    def test_permutation_invariance(self, rng):
        x = rng.normal(size=25)
        y = x + rng.normal(size=25)
        base = icc31(x, y)
        for _ in range(5):
            perm = rng.permutation(25)
            assert icc31(x[perm], y[perm]) == pytest.approx(base, abs=1e-12)

    def test_degenerate_zero_variance(self):
        value, flag = icc31(np.ones(5), np.ones(5), with_flag=True)
        assert value == 0.0 and flag is True

    def test_range(self, rng):
        for _ in range(50):
            x = rng.normal(size=10)
            y = rng.normal(size=10)
            v = icc31(x, y)
            assert -1.0 - 1e-9 <= v <= 1.0 + 1e-9

    def test_preconditions(self):
        with pytest.raises(ValueError):
            icc31([1.0], [1.0])
        with pytest.raises(ValueError):
            icc31([1.0, 2.0], [1.0, 2.0, 3.0])


class TestReportPlumbing:
    def make_report(self):
        from aulatent.config import AU_NAMES

        per = {au: 0.5 for au in AU_NAMES}
        return MetricsReport(per, dict(per), dict(per), 0.5, 0.5, 0.5,
                             0.1, 0.1, 0.01, 1.0, [], {"anchor_mode": "synthetic"})

    def test_csv_shape(self, tmp_path):
        report = self.make_report()
        report.save(tmp_path / "r")
        lines = (tmp_path / "r.csv").read_text().strip().splitlines()
        header = lines[0].split(",")
        assert header[0] == "metric" and header[-1] == "Avg"
        assert len(header) == 14  # metric + 12 AUs + Avg
        assert {row.split(",")[0] for row in lines[1:]} == {"ICC", "MSE", "MSE_neutral"}

    def test_json_roundtrip(self, tmp_path):
        import json

        report = self.make_report()
        report.save(tmp_path / "r")
        blob = json.loads((tmp_path / "r.json").read_text())
        assert blob["icc_average"] == 0.5
        assert blob["metadata"]["anchor_mode"] == "synthetic"

    def test_averages_are_arithmetic_means(self):
        from aulatent.config import AU_NAMES

        rng = np.random.default_rng(2)
        per_icc = {au: float(v) for au, v in zip(AU_NAMES, rng.uniform(size=12))}
        report = MetricsReport(per_icc, dict(per_icc), dict(per_icc),
                               float(np.mean(list(per_icc.values()))), 0, 0,
                               0, 0, 0, 0, [], {})
        assert report.icc_average == pytest.approx(np.mean(list(per_icc.values())))


class TestAblationPlumbing:
    def test_unknown_variant_rejected(self):
        from aulatent.config import Config

        with pytest.raises(ValueError, match="unknown ablation variant"):
            _variant_config(Config(), "mystery")

    def test_variant_transforms(self):
        from aulatent.config import Config

        base = Config()
        sngl = _variant_config(base, "sngl")
        assert not sngl.training.dual_branch and not sngl.training.label_mapping
        dual = _variant_config(base, "dual")
        assert dual.training.dual_branch and not dual.training.label_mapping
        full = _variant_config(base, "label_mapping")
        assert full.training.dual_branch and full.training.label_mapping
        nof = _variant_config(base, "wo_pretrained_fn")
        assert nof.weights.pretrained_fn == 0.0
        assert base.weights.pretrained_fn == 125.0  # base untouched

    def test_empty_variant_list_empty_table(self, tmp_path):
        from aulatent.config import Config
        from aulatent.evaluation import ablation_grid

        rows = ablation_grid(None, [], Config(), None, None, None, None)
        assert rows == []
        ablation_rows_to_csv(rows, tmp_path / "a.csv")
        assert (tmp_path / "a.csv").read_text() == ""

    def test_known_variant_names(self):
        assert set(ABLATION_VARIANTS) >= {"sngl", "dual", "label_mapping",
                                          "wo_pretrained_fn"}


class TestSmileProtocolPreconditions:
    def test_single_level_sweep_rejected(self):
        from aulatent.evaluation import smile_protocol

        with pytest.raises(ValueError):
            smile_protocol(None, None, None, levels=1)

    def test_unknown_anchor_mode(self, mini_world):
        from aulatent.evaluation import eval_editing

        with pytest.raises(ValueError):
            eval_editing(mini_world["model"], mini_world["hest"],
                         mini_world["dataset"], anchor_mode="imagined")


class TestEvalOnMiniWorld:
    def test_report_complete_and_deterministic(self, mini_world):
        from aulatent.evaluation import eval_editing

        a = eval_editing(mini_world["model"], mini_world["hest"],
                         mini_world["dataset"], limit=60)
        b = eval_editing(mini_world["model"], mini_world["hest"],
                         mini_world["dataset"], limit=60)
        assert a.per_au_icc == b.per_au_icc
        assert a.metadata["model_hash"] == b.metadata["model_hash"]
        assert a.metadata["n_frames"] == 60
        assert len(a.per_au_icc) == 12

    def test_mse_decomposability(self, mini_world):
        # report MSE equals the mean of independently recomputed per-frame errors
        import torch
        from aulatent.config import AU_NAMES
        from aulatent.estimators import estimate_absolute
        from aulatent.evaluation import _anchor_images, eval_editing

        ds = mini_world["dataset"]
        model, hest = mini_world["model"], mini_world["hest"]
        report = eval_editing(model, hest, ds, limit=40)

        split = ds.test
        anchors = _anchor_images(model, split, "synthetic")
        jobs = []
        for sid in split.subjects:
            idx = split.indices_of_subject(sid)
            for pos, t in enumerate(idx):
                s = idx[(pos + 1) % len(idx)]
                if s != t:
                    jobs.append((sid, t, s))
        jobs = jobs[:40]
        sq = {au: [] for au in AU_NAMES}
        for sid, t, s in jobs:
            lab = split.records[t].intensities
            res = model.edit_images(split.images[s][None],
                                    torch.as_tensor(lab[None], dtype=torch.float32))
            est = estimate_absolute(hest, res["edited"][0], anchors[sid])
            for a, au in enumerate(AU_NAMES):
                sq[au].append((float(est[a]) - lab[a]) ** 2)
        for au in AU_NAMES:
            assert report.per_au_mse[au] == pytest.approx(np.mean(sq[au]), rel=1e-5)

    def test_smile_protocol_identity_model(self, mini_world, tiny_dims):
        # an untrained model (zero decoders) edits nothing: range ~ 0, rho ~ 0
        import torch
        from aulatent.evaluation import smile_protocol
        from aulatent.training import AUEditModel

        torch.manual_seed(0)
        noop = AUEditModel(mini_world["cfg"].dims).attach(
            mini_world["pair"], mini_world["fpre"], mini_world["identity"])
        out = smile_protocol(noop, mini_world["hest"], mini_world["dataset"], levels=4)
        assert abs(out["mean_range"]) < 1e-5
        assert out["rho"] == 0.0

    def test_contact_sheet_export(self, mini_world, tmp_path):
        from aulatent.evaluation import export_contact_sheet

        export_contact_sheet(mini_world["model"], mini_world["dataset"], [0, 5],
                             tmp_path / "grid.png")
        from PIL import Image

        img = Image.open(tmp_path / "grid.png")
        assert img.size == (64 * 5, 64 * 2)  # five columns, two rows
