import hashlib
import os
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from edgeguard import pipeline as P
from edgeguard.errors import IngestionError, ModelFileError, ParameterError
from edgeguard.synthetic import write_flow_csv


def write(path, text):
    path.write_text(text)
    return path


class TestLoadCsv:
    def test_three_rows(self, tmp_path):
        f = write(tmp_path / "a.csv", "id,dur,proto,attack_cat,label\n1,0.5,tcp,Normal,0\n2,1.5,udp,DoS,1\n"
                                      "3,2.5,tcp,Normal,0\n")
        raw = P.load_csv(f)
        assert len(raw) == 3
        assert raw.numeric == ["dur"] and raw.categorical == ["proto"]
        np.testing.assert_array_equal(raw.y, [0, 1, 0])
        assert list(raw.attack) == ["Normal", "DoS", "Normal"]

    def test_duplicate_header(self, tmp_path):
        f = write(tmp_path / "a.csv", "id,dur,dur,label\n1,1,2,0\n")
        with pytest.raises(IngestionError, match="duplicate"):
            P.load_csv(f)

    def test_missing_label(self, tmp_path):
        f = write(tmp_path / "a.csv", "id,dur\n1,1\n")
        with pytest.raises(IngestionError, match="label"):
            P.load_csv(f)

    def test_unparseable_numeric_names_row(self, tmp_path):
        f = write(tmp_path / "a.csv", "id,dur,label\n1,1.0,0\n2,2.0,1\n3,oops,0\n")
        schema = P.Schema(columns={"dur": "numeric"})
        with pytest.raises(IngestionError, match="row 2"):
            P.load_csv(f, schema)

    def test_missing_values_dropped_and_counted(self, tmp_path):
        f = write(tmp_path / "a.csv", "id,dur,label\n1,1.0,0\n2,,1\n3,3.0,0\n")
        raw = P.load_csv(f)
        assert len(raw) == 2 and raw.n_missing_dropped == 1

    def test_bad_label(self, tmp_path):
        f = write(tmp_path / "a.csv", "id,dur,label\n1,1.0,0\n2,2.0,2\n")
        with pytest.raises(IngestionError, match="0/1"):
            P.load_csv(f)

    def test_non_unique_id(self, tmp_path):
        f = write(tmp_path / "a.csv", "id,dur,label\n1,1.0,0\n1,2.0,1\n")
        with pytest.raises(IngestionError, match="unique"):
            P.load_csv(f)

    def test_row_count_matches_line_count(self, tmp_path):
        # set EDGEGUARD_UNSW_TRAIN to run this against the official training CSV
        official = os.environ.get("EDGEGUARD_UNSW_TRAIN")
        path = Path(official) if official else write_flow_csv(tmp_path / "flows.csv", n=500, seed=3)
        with open(path, encoding="utf-8") as fh:
            lines = sum(1 for line in fh if line.strip())
        assert len(P.load_csv(path)) == lines - 1

    def test_multiple_files_concatenate(self, tmp_path):
        a = write_flow_csv(tmp_path / "a.csv", n=50, seed=1, duplicates=0)
        b = write_flow_csv(tmp_path / "b.csv", n=30, seed=2, duplicates=0)
        assert len(P.load_csv([a, b])) == 80


def raw_from_frame(frame):
    return P.RawDataset(frame.drop(columns="label").reset_index(drop=True), frame["label"].to_numpy(np.int8),
                        [c for c in frame.columns if c != "label"], [])


class TestDedup:
    def test_two_identical_rows(self):
        raw = raw_from_frame(pd.DataFrame({"a": [1.0, 1.0], "label": [1, 1]}))
        assert len(P.dedup(raw)) == 1

    def test_distinct_unchanged(self):
        raw = raw_from_frame(pd.DataFrame({"a": [1.0, 2.0, 1.0], "label": [1, 1, 0]}))
        out = P.dedup(raw)
        assert len(out) == 3
        pd.testing.assert_frame_equal(out.features, raw.features)

    def test_planted_duplicates_match_hash_set(self):
        rng = np.random.default_rng(0)
        base = pd.DataFrame({"a": rng.integers(0, 4, 300).astype(float), "b": rng.integers(0, 3, 300).astype(float),
                             "label": rng.integers(0, 2, 300)})
        raw = raw_from_frame(base)
        seen, first = set(), []
        for i, row in enumerate(base.itertuples(index=False)):
            key = hashlib.sha256(repr(tuple(row)).encode()).hexdigest()
            if key not in seen:
                seen.add(key)
                first.append(i)
        out = P.dedup(raw)
        assert len(out) == len(seen)
        np.testing.assert_array_equal(out.features.to_numpy(), base.iloc[first][["a", "b"]].to_numpy())


def percentile_linear(values, q):
    """Linear interpolation between closest ranks, written out by hand."""
    s = sorted(values)
    pos = (len(s) - 1) * q / 100.0
    lo = int(pos)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)


class TestWinsorize:
    def test_small_max_no_cap(self):
        assert P.winsorize_fit([1, 2, 3]) is None

    def test_heavy_tail_caps_at_p95(self):
        cap = P.winsorize_fit([1, 2, 3, 4, 100])
        assert cap == pytest.approx(percentile_linear([1, 2, 3, 4, 100], 95), abs=1e-12)
        assert cap == pytest.approx(80.8, abs=1e-12)

    def test_constant_no_cap(self):
        assert P.winsorize_fit([5, 5, 5]) is None

    def test_apply(self):
        np.testing.assert_array_equal(P.winsorize_apply([1, 2, 100], 80.8), [1, 2, 80.8])
        np.testing.assert_array_equal(P.winsorize_apply([1, 2, 100], None), [1, 2, 100])

    def test_empty(self):
        with pytest.raises(ParameterError):
            P.winsorize_fit([])

    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=40), st.floats(-1e6, 1e6))
    def test_order_preserved(self, values, cap):
        x = np.asarray(values)
        out = P.winsorize_apply(x, cap)
        i, j = np.meshgrid(np.arange(x.size), np.arange(x.size))
        assert not np.any((x[i] < x[j]) & (out[i] > out[j]))


class TestOneHot:
    def test_two_categories(self):
        v = P.onehot_fit(["a", "a", "b"])
        assert v.categories == ["a", "b"] and v.columns == ["b"]
        np.testing.assert_array_equal(P.onehot_apply(["a", "b"], v), [[0.0], [1.0]])

    def test_top_k_with_other(self):
        # category c_i appears 20 - i times so the frequency order is c0, c1, ...
        column = [f"c{i}" for i in range(10) for _ in range(20 - i)]
        v = P.onehot_fit(column, max_categories=4)
        counts = pd.Series(column).value_counts()
        expected = list(counts.index[:3])
        assert v.categories == expected and v.has_other
        assert v.columns == expected[1:] + [P.OTHER]
        enc = P.onehot_apply(column, v)
        assert enc.shape == (len(column), 3)
        assert enc[:, -1].sum() == counts.iloc[3:].sum()

    def test_unseen_goes_to_other(self):
        v = P.onehot_fit(list("aabbccdde"), max_categories=3)
        np.testing.assert_array_equal(P.onehot_apply(["zzz"], v)[0], [0.0, 1.0])

    def test_unseen_without_other_is_reference(self):
        v = P.onehot_fit(["a", "a", "b"])
        np.testing.assert_array_equal(P.onehot_apply(["q"], v), [[0.0]])

    def test_empty(self):
        with pytest.raises(ParameterError):
            P.onehot_fit([])


class TestScale:
    def test_two_points(self):
        mean, std, keep = P.scale_fit(np.array([[0.0], [2.0]]))
        assert mean[0] == 1.0 and std[0] == 1.0
        np.testing.assert_array_equal(P.scale_apply([[0.0], [2.0]], mean, std, keep), [[-1.0], [1.0]])

    def test_reapply_to_train(self):
        X = np.random.default_rng(0).normal(3.0, 7.0, size=(500, 4))
        Z = P.scale_apply(X, *P.scale_fit(X))
        assert np.all(np.abs(Z.mean(axis=0)) < 1e-12)
        np.testing.assert_allclose(Z.std(axis=0), 1.0, atol=1e-12)

    def test_test_uses_train_stats(self):
        train = np.array([[0.0], [2.0], [4.0]])
        test = np.array([[10.0], [20.0]])
        Z = P.scale_apply(test, *P.scale_fit(train))
        np.testing.assert_allclose(Z[:, 0], (test[:, 0] - 2.0) / np.sqrt(8.0 / 3.0))
        assert abs(Z.mean()) > 1.0

    def test_constant_column_dropped(self):
        X = np.column_stack([np.arange(5.0), np.full(5, 3.0)])
        mean, std, keep = P.scale_fit(X)
        np.testing.assert_array_equal(keep, [True, False])
        assert P.scale_apply(X, mean, std, keep).shape == (5, 1)


class TestSplit:
    def test_exact_division(self):
        y = np.array([1] * 60 + [0] * 40)
        a, b = P.stratified_split(y, 0.8, seed=0)
        assert (y[a] == 1).sum() == 48 and (y[a] == 0).sum() == 32
        assert (y[b] == 1).sum() == 12 and (y[b] == 0).sum() == 8

    def test_largest_remainder(self):
        y = np.array([1] * 6 + [0] * 4)
        a, b = P.stratified_split(y, 0.8, seed=0)
        assert ((y[a] == 1).sum(), (y[a] == 0).sum()) == (5, 3)
        assert ((y[b] == 1).sum(), (y[b] == 0).sum()) == (1, 1)

    def test_deterministic_and_disjoint(self):
        y = np.random.default_rng(0).integers(0, 2, 200)
        a1, b1 = P.stratified_split(y, 0.8, seed=7)
        a2, b2 = P.stratified_split(y, 0.8, seed=7)
        np.testing.assert_array_equal(a1, a2)
        np.testing.assert_array_equal(b1, b2)
        assert set(a1).isdisjoint(b1) and len(a1) + len(b1) == 200

    def test_tiny_class(self):
        with pytest.raises(ParameterError):
            P.stratified_split(np.array([0, 0, 0, 1]), 0.8)

    @given(st.integers(2, 60), st.integers(2, 60), st.sampled_from([0.5, 0.7, 0.8, 0.9]))
    def test_ratio_within_rounding(self, n0, n1, ratio):
        y = np.array([0] * n0 + [1] * n1)
        a, _ = P.stratified_split(y, ratio, seed=0)
        assert len(a) == int(ratio * (n0 + n1) + 0.5 + 1e-9)
        for cls, n in ((0, n0), (1, n1)):
            assert abs((y[a] == cls).sum() - ratio * n) < 1.0 + 1e-9


class TestSmote:
    def test_balanced_identity(self):
        X, y = np.arange(8.0).reshape(4, 2), np.array([0, 1, 0, 1])
        Xo, yo = P.smote(X, y)
        np.testing.assert_array_equal(Xo, X)
        np.testing.assert_array_equal(yo, y)

    def test_two_point_segment(self):
        X = np.array([[0.0, 0.0], [1.0, 1.0], [5.0, 5.0], [6.0, 5.0], [7.0, 5.0], [8.0, 5.0]])
        y = np.array([1, 1, 0, 0, 0, 0])
        Xo, yo = P.smote(X, y, k=1, seed=0)
        synth = Xo[6:]
        assert synth.shape == (2, 2) and np.all(yo[6:] == 1)
        np.testing.assert_array_equal(synth[:, 0], synth[:, 1])
        assert np.all((synth >= 0) & (synth <= 1))

    def test_convex_combination(self):
        rng = np.random.default_rng(1)
        X = np.vstack([rng.normal(size=(100, 3)), rng.normal(3.0, 1.0, size=(30, 3))])
        y = np.array([0] * 100 + [1] * 30)
        Xo, yo = P.smote(X, y, k=5, seed=2)
        assert (yo == 0).sum() == 100 and (yo == 1).sum() == 100
        np.testing.assert_array_equal(Xo[:130], X)
        minority = X[y == 1]
        for s in Xo[130:]:
            assert min_convex_residual(s, minority) < 1e-9

    def test_single_minority(self):
        with pytest.raises(ParameterError, match="lower k"):
            P.smote(np.zeros((4, 2)), np.array([0, 0, 0, 1]))


def min_convex_residual(s, pool):
    """Smallest residual of ``s = a + u (b - a)`` over minority pairs with ``u`` in [0, 1]."""
    best = np.inf
    for a in pool:
        d = pool - a
        denom = np.einsum("ij,ij->i", d, d)
        u = np.where(denom > 0, d @ (s - a) / np.where(denom > 0, denom, 1.0), 0.0)
        u = np.clip(u, 0.0, 1.0)
        res = np.abs(a + u[:, None] * d - s).max(axis=1)
        best = min(best, res.min())
    return best


class TestFeatureMatrix:
    def test_round_trip(self, tmp_path):
        fm = P.FeatureMatrix(np.arange(6.0).reshape(3, 2), [0, 1, 1], ["a", "b"], np.array(["x", "y", "z"]))
        fm.save(tmp_path / "m.egfm")
        back = P.FeatureMatrix.load(tmp_path / "m.egfm")
        np.testing.assert_array_equal(back.X, fm.X)
        np.testing.assert_array_equal(back.y, fm.y)
        assert back.feature_names == ["a", "b"] and list(back.attack_tags) == ["x", "y", "z"]

    def test_corruption(self):
        blob = bytearray(P.FeatureMatrix(np.ones((2, 2)), [0, 1], ["a", "b"]).to_bytes())
        blob[30] ^= 1
        with pytest.raises(ModelFileError):
            P.FeatureMatrix.from_bytes(bytes(blob))


@pytest.fixture(scope="module")
def flow_raw(tmp_path_factory):
    path = write_flow_csv(tmp_path_factory.mktemp("flows") / "flows.csv", n=1500, dim=6, seed=4)
    return P.load_csv(path)


class TestPreprocess:
    def test_shapes_and_audit(self, flow_raw):
        res = P.preprocess(flow_raw, seed=0)
        assert res.train.dim == res.val.dim == res.test.dim
        assert not np.isnan(res.train.X).any()
        counts = res.audit["train_class_counts"]
        assert counts["0"] == counts["1"]
        assert res.audit["duplicates_removed"] > 0
        assert "sbytes" in res.audit["capped_features"]
        assert res.audit["dropped_constant_columns"] == ["swin"]
        assert len(res.test) == round(0.2 * len(flow_raw))
        n_synth = res.audit["smote_added"]
        assert np.all(res.train.attack_tags[-n_synth:] == "synthetic")

    def test_deterministic_bytes(self, flow_raw):
        a, b = P.preprocess(flow_raw, seed=3), P.preprocess(flow_raw, seed=3)
        for part in ("train", "val", "test"):
            assert getattr(a, part).to_bytes() == getattr(b, part).to_bytes()
        assert P.preprocess(flow_raw, seed=4).train.to_bytes() != a.train.to_bytes()

    def test_spec_never_sees_test_rows(self, flow_raw):
        seed = 5
        split_seed = np.random.SeedSequence(seed).generate_state(3)[0]
        _, test_idx = P.stratified_split(flow_raw.y, 0.8, split_seed)
        poisoned = flow_raw.subset(np.arange(len(flow_raw)))
        for c in poisoned.numeric:
            poisoned.features.loc[test_idx, c] = 1e9
        poisoned.features.loc[test_idx, "proto"] = "never-seen"
        clean, dirty = P.preprocess(flow_raw, seed=seed), P.preprocess(poisoned, seed=seed)
        assert clean.spec.to_dict() == dirty.spec.to_dict()
        assert clean.train.to_bytes() == dirty.train.to_bytes()
        # a transform fitted on the test rows themselves would differ
        test_spec = P.fit_transform_spec(flow_raw.subset(test_idx))
        assert not np.allclose(test_spec.mean[:6], clean.spec.mean[:6])

    def test_spec_json_round_trip(self, flow_raw):
        res = P.preprocess(flow_raw, seed=1)
        spec = P.TransformSpec.from_dict(res.spec.to_dict())
        assert spec.transform(flow_raw).to_bytes() == res.spec.transform(flow_raw).to_bytes()

    def test_without_smote_keeps_ratio(self, flow_raw):
        res = P.preprocess(flow_raw, P.PipelineConfig(apply_smote=False), seed=0)
        frac = flow_raw.y.mean()
        assert abs(res.test.y.mean() - frac) < 2.0 / len(res.test)
