import numpy as np
import pytest

from drycss.errors import DataError
from drycss.grid import GridSpec, TimeAxis, VARIABLES, extract_series
from drycss.neural import TrainParams
from drycss.pipeline import (CALIBRATION_CATEGORIES, Calibration, GridSettings,
                             LabeledSample, aggregate_metrics, category_means,
                             compute_run_metrics, derive_seed, ensemble_scores,
                             enumerate_grid, fit_calibration, holdout_split,
                             load_run_record, load_samples, map_agreement_iou,
                             out_of_fold_scores, pearson_r, predict_map,
                             ranking_overlap, rmse, run_training_grid,
                             save_run_record, save_samples, train_one_run)
from drycss.spectral import dft_coefficients
from drycss.synth import synth_cube


class TestSeeds:
    def test_stable_and_distinct(self):
        a = derive_seed(0, "synth", "ndvi")
        assert a == derive_seed(0, "synth", "ndvi")
        assert 0 <= a < 2 ** 63
        assert len({derive_seed(0, "a"), derive_seed(0, "b"),
                    derive_seed(1, "a"), derive_seed(0, "a", 0)}) == 4

    def test_part_types_distinguish(self):
        assert derive_seed(0, 1) != derive_seed(0, "1")


class TestMetrics:
    def test_rmse_and_pearson(self):
        a = np.array([1.0, 2.0, 3.0])
        assert rmse(a, a) == 0.0
        assert rmse(a, a + 2.0) == pytest.approx(2.0)
        assert pearson_r(a, 2 * a + 1) == pytest.approx(1.0)
        assert pearson_r(a, -a) == pytest.approx(-1.0)
        assert np.isnan(pearson_r(a, np.ones(3)))
        assert np.isnan(pearson_r(np.array([1.0]), np.array([1.0])))
        with pytest.raises(ValueError, match="mismatch"):
            rmse(a, np.zeros(4))

    def test_run_metrics_split_correctly(self):
        scores = np.array([0.0, 1.0, 0.5, 0.25])
        labels = np.array([0.0, 1.0, 1.0, 0.0])
        m = compute_run_metrics(scores, labels, [0, 1], [2, 3])
        assert m["train_rmse"] == 0.0
        assert m["val_rmse"] == pytest.approx(np.sqrt((0.25 + 0.0625) / 2))


class TestHoldout:
    def test_sizes_partition_and_sorting(self):
        rng = np.random.default_rng(0)
        for n, frac, nv in ((230, 0.1, 23), (10, 0.1, 1), (5, 0.9, 4),
                            (2, 0.5, 1)):
            train, val = holdout_split(n, frac, rng)
            assert len(val) == nv and len(train) == n - nv
            assert sorted(np.r_[train, val].tolist()) == list(range(n))
            assert list(val) == sorted(val) and list(train) == sorted(train)

    def test_seeded(self):
        a = holdout_split(50, 0.1, np.random.default_rng(7))
        b = holdout_split(50, 0.1, np.random.default_rng(7))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_bad_args(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="fraction"):
            holdout_split(10, 0.0, rng)
        with pytest.raises(ValueError, match="at least 2"):
            holdout_split(1, 0.1, rng)


class TestSampleIO:
    def test_round_trip_exact_floats(self, tmp_path):
        samples = [LabeledSample(site_id=0, lat=20.1234567891234, lon=40.1,
                                 iy=1, ix=2, category="HiSuit-HiVeg",
                                 label=1.0, ndvi=0.1 + 0.2),
                   LabeledSample(site_id=1, lat=21.0, lon=41.0, iy=3, ix=4,
                                 category="LoSuit-LoVeg", label=0.0, ndvi=0.05)]
        save_samples(samples, tmp_path / "s.csv")
        back = load_samples(tmp_path / "s.csv")
        assert back == samples  # repr round-trips floats bit-exactly

    def test_errors(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_samples(tmp_path / "missing.csv")
        p = tmp_path / "bad.csv"
        p.write_text("site_id,lat\n1,notafloat\n")
        with pytest.raises(DataError, match="malformed"):
            load_samples(p)
        p2 = tmp_path / "empty.csv"
        p2.write_text("site_id,lat,lon,iy,ix,category,label,ndvi\n")
        with pytest.raises(DataError, match="empty"):
            load_samples(p2)


class TestRunRecords:
    def test_round_trip(self, tmp_path):
        from drycss.pipeline import TrainingRun
        run = TrainingRun(kind="blup", size=8, repetition=3, seed=99,
                          train_ids=[0, 2], val_ids=[1],
                          scores=np.array([0.1, 0.2, 0.3]),
                          metrics={"val_rmse": 0.5})
        save_run_record(run, tmp_path / "r.json")
        back = load_run_record(tmp_path / "r.json")
        assert (back.kind, back.size, back.repetition, back.seed) == \
            ("blup", 8, 3, 99)
        assert back.run_id == "blup_8_3"
        assert back.train_ids == [0, 2] and back.val_ids == [1]
        np.testing.assert_allclose(back.scores, run.scores)
        assert back.metrics == {"val_rmse": 0.5}
        with pytest.raises(DataError, match="not found"):
            load_run_record(tmp_path / "nope.json")


class TestGridEnumeration:
    def test_canonical_order(self):
        cells = enumerate_grid((2, 4), (8,), 2)
        assert cells == [("blup", 2, 0), ("blup", 2, 1),
                         ("blup", 4, 0), ("blup", 4, 1),
                         ("nn", 8, 0), ("nn", 8, 1)]


def make_training_problem(n=40, n_vars=3, T=32, seed=0):
    """Labels carried by the annual-bin amplitude of the first variable.

    Continuous labels so every random validation split has variance and
    correlation metrics stay defined.
    """
    rng = np.random.default_rng(seed)
    names = tuple(f"v{i}" for i in range(n_vars))
    labels = np.linspace(0.0, 1.0, n)
    t = np.arange(T)
    series = rng.standard_normal((n, n_vars, T)) * 0.3
    series[:, 0, :] += (1.0 + 2.0 * labels[:, None]) * np.cos(2 * np.pi * t / T)
    coeffs = dft_coefficients(series)
    settings = GridSettings(variables=names, n_steps=T, nn_feature_bins=4,
                            train_params=TrainParams(epochs=40))
    return coeffs, labels, settings


class TestTrainOneRun:
    def test_blup_run_learns_and_records_split(self):
        coeffs, labels, settings = make_training_problem()
        run, model = train_one_run(coeffs, labels, "blup", 4, 0, 123, settings)
        assert run.run_id == "blup_4_0"
        assert len(run.val_ids) == 4 and len(run.train_ids) == 36
        assert not set(run.train_ids) & set(run.val_ids)
        assert run.scores.shape == (40,)
        assert run.metrics["val_r"] > 0.5
        assert model.kind == "blup" and model.size == 4

    def test_selection_fit_on_training_split_only(self):
        coeffs, labels, settings = make_training_problem()
        run, model = train_one_run(coeffs, labels, "blup", 3, 0, 5, settings)
        from drycss.spectral import select_frequencies
        sel = select_frequencies(coeffs[run.train_ids], settings.variables, 3,
                                 settings.n_steps)
        np.testing.assert_array_equal(model.selection.bins, sel.bins)

    def test_nn_run_trains(self):
        coeffs, labels, settings = make_training_problem()
        run, model = train_one_run(coeffs, labels, "nn", 4, 1, 7, settings)
        assert model.autoencoder.latent_dim == 4
        assert run.metrics["train_r"] > 0.5

    def test_fixed_lambda_and_loo(self):
        coeffs, labels, settings = make_training_problem()
        settings.blup_lambda = 2.5
        _, model = train_one_run(coeffs, labels, "blup", 2, 0, 1, settings)
        assert model.blup.lam == 2.5
        settings.blup_lambda = "loo"
        _, model = train_one_run(coeffs, labels, "blup", 2, 0, 1, settings)
        p = model.blup.n_features
        assert model.blup.lam in {m * p for m in (0.01, 0.1, 1.0, 10.0, 100.0)}

    def test_unknown_kind(self):
        coeffs, labels, settings = make_training_problem()
        with pytest.raises(ValueError, match="kind"):
            train_one_run(coeffs, labels, "forest", 2, 0, 0, settings)


class TestTrainingGrid:
    @pytest.fixture(scope="class")
    @classmethod
    def problem(cls):
        return make_training_problem(n=30, seed=1)

    def test_serial_matches_parallel(self, problem):
        coeffs, labels, settings = problem
        kw = dict(blup_sizes=(2,), nn_sizes=(4,), repetitions=2, root_seed=3)
        runs1, models1 = run_training_grid(coeffs, labels, settings, jobs=1, **kw)
        runs2, models2 = run_training_grid(coeffs, labels, settings, jobs=3, **kw)
        assert [r.run_id for r in runs1] == [r.run_id for r in runs2] == \
            ["blup_2_0", "blup_2_1", "nn_4_0", "nn_4_1"]
        for a, b in zip(runs1, runs2):
            assert a.seed == b.seed == derive_seed(3, a.kind, a.size,
                                                   a.repetition)
            np.testing.assert_array_equal(a.scores, b.scores)
            assert a.metrics == b.metrics

    def test_failed_run_recorded_not_fatal(self, problem, monkeypatch):
        import drycss.pipeline as pl
        from drycss.errors import NumericalError

        real = pl.train_one_run

        def flaky(coeffs, labels, kind, size, rep, seed, settings):
            if kind == "nn":
                raise NumericalError("training diverged", epoch=0)
            return real(coeffs, labels, kind, size, rep, seed, settings)

        monkeypatch.setattr(pl, "train_one_run", flaky)
        coeffs, labels, settings = problem
        with pytest.warns(UserWarning, match="diverged"):
            runs, models = run_training_grid(coeffs, labels, settings,
                                             blup_sizes=(2,), nn_sizes=(4,),
                                             repetitions=1, jobs=1)
        assert [r.failed for r in runs] == [False, True]
        assert models[1] is None
        agg = aggregate_metrics(runs)
        nn_row = next(r for r in agg if r["kind"] == "nn")
        assert nn_row["n_failed"] == 1 and np.isnan(nn_row["val_rmse_mean"])

    def test_shape_mismatch(self, problem):
        coeffs, labels, settings = problem
        with pytest.raises(ValueError, match="labels"):
            run_training_grid(coeffs, labels[:-1], settings)


class TestAggregation:
    def test_mean_and_std_by_cell(self):
        from drycss.pipeline import TrainingRun
        runs = [TrainingRun(kind="blup", size=2, repetition=r, seed=0,
                            metrics={"train_rmse": v, "val_rmse": v + 1,
                                     "train_r": 0.5, "val_r": 0.5})
                for r, v in enumerate((1.0, 3.0))]
        rows = aggregate_metrics(runs)
        assert len(rows) == 1
        row = rows[0]
        assert row["train_rmse_mean"] == pytest.approx(2.0)
        assert row["train_rmse_std"] == pytest.approx(np.sqrt(2.0))  # ddof=1
        assert row["n_runs"] == 2 and row["n_failed"] == 0

    def test_out_of_fold_scores(self):
        from drycss.pipeline import TrainingRun
        runs = [
            TrainingRun(kind="blup", size=2, repetition=0, seed=0,
                        val_ids=[0, 1], scores=np.array([1.0, 2.0, 9.0])),
            TrainingRun(kind="blup", size=2, repetition=1, seed=0,
                        val_ids=[1], scores=np.array([9.0, 4.0, 9.0])),
            TrainingRun(kind="nn", size=4, repetition=0, seed=0, failed=True),
        ]
        oof = out_of_fold_scores(runs, 3)
        assert oof[0] == pytest.approx(1.0)
        assert oof[1] == pytest.approx(3.0)
        assert np.isnan(oof[2])


class TestEnsembleAndCalibration:
    def test_ensemble_means_by_kind(self):
        coeffs, labels, settings = make_training_problem(n=20)
        runs, models = run_training_grid(coeffs, labels, settings,
                                         blup_sizes=(2, 4), nn_sizes=(),
                                         repetitions=1, jobs=1)
        scores = ensemble_scores(models, coeffs)
        assert set(scores) == {"blup", "combined"}
        direct = np.mean([m.score_coefficients(coeffs) for m in models], axis=0)
        np.testing.assert_allclose(scores["combined"], direct)
        np.testing.assert_allclose(scores["blup"], direct)
        with pytest.raises(DataError, match="no trained models"):
            ensemble_scores([None, None], coeffs)

    def test_category_means(self):
        samples = [
            LabeledSample(0, 0, 0, 0, 0, "HiSuit-HiVeg", 1.0, 0.5),
            LabeledSample(1, 0, 0, 0, 1, "HiSuit-HiVeg", 1.0, 0.6),
            LabeledSample(2, 0, 0, 0, 2, "LoSuit-LoVeg", 0.0, 0.1),
        ]
        means = category_means(samples, np.array([0.8, 0.6, 0.2]))
        assert means == {"HiSuit-HiVeg": pytest.approx(0.7),
                         "LoSuit-LoVeg": pytest.approx(0.2)}

    def test_calibration_recovers_exact_line(self):
        rng = np.random.default_rng(0)
        scores = rng.uniform(0, 1, 12)
        samples = [LabeledSample(i, 0, 0, 0, i,
                                 CALIBRATION_CATEGORIES[i % 2], float(i % 2),
                                 ndvi=0.3 * s + 0.05)
                   for i, s in enumerate(scores)]
        cal = fit_calibration(samples, scores)
        assert cal.slope == pytest.approx(0.3)
        assert cal.intercept == pytest.approx(0.05)
        assert cal.r2 == pytest.approx(1.0)
        assert cal.n == 12
        np.testing.assert_allclose(cal.apply(scores), 0.3 * scores + 0.05)

    def test_calibration_ignores_other_categories(self):
        scores = np.array([0.0, 1.0, 0.5, 0.5])
        samples = [
            LabeledSample(0, 0, 0, 0, 0, "HiSuit-HiVeg", 1.0, 0.0),
            LabeledSample(1, 0, 0, 0, 1, "LoSuit-LoVeg", 0.0, 1.0),
            LabeledSample(2, 0, 0, 0, 2, "LoSuit-HiVeg", 0.0, 99.0),
            LabeledSample(3, 0, 0, 0, 3, "HiSuit-LoVeg", 1.0, -99.0),
        ]
        cal = fit_calibration(samples, scores)
        assert cal.n == 2
        assert cal.slope == pytest.approx(1.0)
        assert cal.intercept == pytest.approx(0.0)

    def test_calibration_errors(self):
        samples = [LabeledSample(0, 0, 0, 0, 0, "HiSuit-HiVeg", 1.0, 0.5),
                   LabeledSample(1, 0, 0, 0, 1, "LoSuit-LoVeg", 0.0, 0.1)]
        with pytest.raises(DataError, match="zero variance"):
            fit_calibration(samples, np.array([0.5, 0.5]))
        with pytest.raises(DataError, match="at least 2"):
            fit_calibration(samples[:1], np.array([0.5]))
        with pytest.raises(DataError, match="non-finite"):
            fit_calibration(samples, np.array([0.5, np.nan]))

    def test_calibration_dict_round_trip(self):
        cal = Calibration(slope=0.3, intercept=0.05, r2=0.9, n=10)
        assert Calibration.from_dict(cal.to_dict()) == cal
        with pytest.raises(DataError, match="slope"):
            Calibration.from_dict({"intercept": 0.0, "r2": 0.0, "n": 1})


class TestPredictMap:
    @pytest.fixture(scope="class")
    @classmethod
    def setup(cls):
        spec = GridSpec(lat_min=0.0, lat_max=0.7, lon_min=10.0, lon_max=10.7,
                        n_lat=8, n_lon=8)
        taxis = TimeAxis(start="2020-01-01T00:00:00Z", step_hours=3.0,
                         n_steps=64)
        cube, suit = synth_cube(spec, taxis, seed=2, invalid_fraction=0.1)
        rng = np.random.default_rng(0)
        coeffs = []
        labels = []
        for flat in np.flatnonzero(cube.mask)[:20]:
            iy, ix = divmod(int(flat), 8)
            series, _ = extract_series(cube, *spec.node(iy, ix))
            coeffs.append(dft_coefficients(series))
            labels.append(float(suit[iy, ix]))
        coeffs = np.stack(coeffs)
        labels = np.asarray(labels)
        settings = GridSettings(variables=VARIABLES, n_steps=64,
                                train_params=TrainParams(epochs=20))
        runs, models = run_training_grid(coeffs, labels, settings,
                                         blup_sizes=(2,), nn_sizes=(4,),
                                         repetitions=1, root_seed=1, jobs=1)
        return cube, models

    def test_matches_direct_scoring_exactly(self, setup):
        cube, models = setup
        maps = predict_map(models, cube, jobs=1)
        assert set(maps) == {"blup", "nn", "combined"}
        iy, ix = 3, 5
        if not cube.mask[iy, ix]:
            iy, ix = map(int, divmod(int(np.flatnonzero(cube.mask)[0]), 8))
        series, _ = extract_series(cube, *cube.spec.node(iy, ix))
        c = dft_coefficients(series)
        per_model = [m.score_coefficients(c[None])[0] for m in models]
        assert maps["blup"][iy, ix] == np.float64(per_model[0])
        # batched matmuls may regroup sums vs a single-pixel pass
        assert maps["nn"][iy, ix] == pytest.approx(per_model[1], rel=1e-12)
        assert maps["combined"][iy, ix] == pytest.approx(np.mean(per_model),
                                                         rel=1e-12)

    def test_invalid_pixels_are_nan(self, setup):
        cube, models = setup
        maps = predict_map(models, cube, jobs=1)
        assert np.isnan(maps["combined"][~cube.mask]).all()
        assert np.isfinite(maps["combined"][cube.mask]).all()

    def test_thread_count_does_not_change_bytes(self, setup):
        cube, models = setup
        a = predict_map(models, cube, jobs=1)
        b = predict_map(models, cube, jobs=4)
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_lineage_checks(self, setup):
        cube, models = setup
        other = GridSpec(lat_min=0, lat_max=0.7, lon_min=10, lon_max=10.7,
                         n_lat=8, n_lon=8)
        short = TimeAxis(start="2020-01-01T00:00:00Z", step_hours=3.0,
                         n_steps=32)
        wrong, _ = synth_cube(other, short, seed=0)
        with pytest.raises(DataError, match="time steps"):
            predict_map(models, wrong)
        with pytest.raises(DataError, match="no trained models"):
            predict_map([None], cube)


class TestAgreement:
    def test_four_pixel_case_is_one_third(self):
        # suitable sets {p0, p1} and {p0, p2}: intersection 1, union 3
        a = np.array([[0.9, 0.9], [0.1, 0.1]])
        b = np.array([[0.9, 0.1], [0.9, 0.1]])
        assert map_agreement_iou(a, b, threshold=0.5) == pytest.approx(1 / 3)

    def test_identical_maps_give_one(self):
        a = np.random.default_rng(0).uniform(0, 1, (5, 5))
        assert map_agreement_iou(a, a) == 1.0

    def test_nan_pixels_ignored_and_empty_union_nan(self):
        a = np.array([[np.nan, 0.9], [0.1, 0.2]])
        b = np.array([[0.9, 0.9], [0.1, 0.2]])
        assert map_agreement_iou(a, b) == 1.0
        assert np.isnan(map_agreement_iou(np.zeros((2, 2)), np.zeros((2, 2))))
        with pytest.raises(DataError, match="misaligned"):
            map_agreement_iou(np.zeros((2, 2)), np.zeros((3, 2)))


class TestRankingOverlap:
    def test_hand_case(self):
        rankings = {
            "x": {1: 10.0, 2: 9.0, 3: 8.0, 4: 1.0, 5: 0.0, 6: -1.0},
            "y": {1: 10.0, 2: 0.5, 3: 8.0, 4: 9.0, 5: 0.0, 6: -1.0},
        }
        out = ranking_overlap(rankings, n=2)
        # top-2: x -> {1, 2}, y -> {1, 4}
        assert out["top"][("x", "y")] == 1
        assert out["top"][("x",)] == 1 and out["top"][("y",)] == 1
        # bottom-2: both -> {5, 6}
        assert out["bottom"][("x", "y")] == 2
        assert out["bottom"][("x",)] == 0 and out["bottom"][("y",)] == 0

    def test_ties_break_toward_smaller_id(self):
        rankings = {"x": {1: 1.0, 2: 1.0, 3: 1.0}}
        out = ranking_overlap(rankings, n=2)
        assert out["top"][("x",)] == 2  # ids 1 and 2
        # the same ids win the bottom set under the ascending tie rule
        assert out["bottom"][("x",)] == 2

    def test_validation(self):
        with pytest.raises(ValueError, match="no rankings"):
            ranking_overlap({})
        with pytest.raises(ValueError, match="different id set"):
            ranking_overlap({"x": {1: 0.0}, "y": {2: 0.0}}, n=1)
        with pytest.raises(ValueError, match="n="):
            ranking_overlap({"x": {1: 0.0}}, n=5)
