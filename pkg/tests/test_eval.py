import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from racl.audio import Provenance, read_manifest
from racl.config import RunConfig
from racl.errors import RaclError, UndefinedEERError
from racl.evaluation import (
    ScoreRecord,
    Scored,
    build_report,
    distances_oracle,
    eer,
    eer_oracle,
    embedding_distances,
    read_scores,
    report_schema,
    score_manifest,
    subset_report,
    write_embeddings,
    write_scores,
)
from racl.train import init_params

B, S, RB, RS = Provenance


class TestEer:
    @pytest.mark.parametrize("bona,spoof,expected", [
        ([0.1, 0.2], [0.8, 0.9], 0.0),
        ([0.9], [0.1], 100.0),
        ([0.2, 0.6], [0.4, 0.8], 50.0),
        ([0.5], [0.5], 50.0),
        ([0.5, 0.5, 0.5], [0.5, 0.5], 50.0),
    ])
    def test_examples(self, bona, spoof, expected):
        assert eer(bona, spoof) == pytest.approx(expected, abs=1e-12)
        assert eer_oracle(bona, spoof) == pytest.approx(expected, abs=1e-12)

    def test_empty_class(self):
        with pytest.raises(UndefinedEERError):
            eer([], [0.1])
        with pytest.raises(UndefinedEERError):
            eer_oracle([0.1], [])

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 25), st.integers(1, 25))
    def test_matches_oracle_with_ties(self, seed, nb, ns):
        rng = np.random.default_rng(seed)
        bona = rng.integers(0, 8, nb) / 8.0
        spoof = rng.integers(0, 8, ns) / 8.0 + rng.uniform(0, 0.3)
        assert abs(eer(bona, spoof) - eer_oracle(bona, spoof)) <= 1e-9

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_strictly_monotone_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        bona, spoof = rng.normal(0, 1, 30), rng.normal(0.8, 1, 40)
        ref = eer(bona, spoof)
        assert eer(np.exp(bona), np.exp(spoof)) == pytest.approx(ref, abs=1e-9)
        assert eer(3 * bona - 1, 3 * spoof - 1) == pytest.approx(ref, abs=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_swapping_classes_on_distinct_scores(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.permutation(40) / 40.0  # distinct, equal-size classes
        bona, spoof = scores[:20], scores[20:]
        assert eer(spoof, bona) == pytest.approx(100.0 - eer(bona, spoof), abs=1e-9)

    def test_range(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            v = eer(rng.uniform(size=7), rng.uniform(size=9))
            assert 0.0 <= v <= 100.0


class TestSubsets:
    def _records(self):
        rs = [ScoreRecord("a1", "A", 0, 0.1), ScoreRecord("a2", "A", 1, 0.9),
              ScoreRecord("b1", "B", 0, 0.9), ScoreRecord("b2", "B", 1, 0.1)]
        return rs

    def test_average_is_unweighted(self):
        per, avg = subset_report(self._records())
        assert per == {"A": 0.0, "B": 100.0} and avg == 50.0

    def test_single_class_subset_excluded_with_warning(self):
        recs = self._records() + [ScoreRecord("c1", "C", 1, 0.3)]
        with pytest.warns(UserWarning, match="single class"):
            per, avg = subset_report(recs)
        assert per["C"] is None and avg == 50.0

    def test_errors(self):
        with pytest.raises(RaclError):
            subset_report([])
        with pytest.warns(UserWarning), pytest.raises(UndefinedEERError):
            subset_report([ScoreRecord("x", "A", 0, 0.2)])


class TestDistances:
    def test_three_four_five(self):
        emb = np.array([[0.0, 0.0], [3.0, 4.0]])
        d = embedding_distances(emb, [B, RB])
        assert d["matrix"][0][2] == 5.0 and d["matrix"][2][0] == 5.0
        assert d["bona_vs_rec_bona"] == 5.0 and d["bona_vs_others"] == 5.0
        assert d["matrix"][0][0] is None and d["matrix"][1][1] is None

    def test_coincident_points(self):
        d = embedding_distances(np.ones((8, 3)), [B, S, RB, RS] * 2)
        assert np.array_equal(np.array(d["matrix"], dtype=float), np.zeros((4, 4)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_loop_oracle_and_is_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 14))
        emb = rng.normal(size=(n, 3))
        prov = [list(Provenance)[i] for i in rng.integers(0, 4, n)]
        got = embedding_distances(emb, prov)["matrix"]
        ref = distances_oracle(emb, prov)
        for a in range(4):
            for b in range(4):
                assert (got[a][b] is None) == (ref[a][b] is None)
                if got[a][b] is not None:
                    assert got[a][b] == pytest.approx(ref[a][b], rel=1e-12)
                    assert got[a][b] == got[b][a] and got[a][b] >= 0

    def test_scaling(self):
        rng = np.random.default_rng(1)
        emb, prov = rng.normal(size=(12, 4)), [B, S, RB, RS] * 3
        base = np.array(embedding_distances(emb, prov)["matrix"], dtype=float)
        scaled = np.array(embedding_distances(2.5 * emb, prov)["matrix"], dtype=float)
        np.testing.assert_allclose(scaled, 2.5 * base, rtol=1e-13)

    def test_translation_invariance(self):
        rng = np.random.default_rng(2)
        emb, prov = rng.normal(size=(12, 4)), [B, S, RB, RS] * 3
        a = np.array(embedding_distances(emb, prov)["matrix"], dtype=float)
        b = np.array(embedding_distances(emb + 7.0, prov)["matrix"], dtype=float)
        np.testing.assert_allclose(a, b, rtol=1e-12)


class TestFiles:
    def test_scores_round_trip(self, tmp_path):
        recs = [ScoreRecord("x", "all", 0, 0.1 + 0.2), ScoreRecord("y", "all", 1, 1 / 3)]
        write_scores(tmp_path / "s.tsv", recs, "ab" * 32)
        text = (tmp_path / "s.tsv").read_text()
        assert text.startswith("# config_hash=" + "ab" * 32)
        back = read_scores(tmp_path / "s.tsv")
        assert [(r.source_id, r.label, r.score) for r in back] == [(r.source_id, r.label, r.score) for r in recs]

    def test_embeddings_file(self, tmp_path):
        recs = [ScoreRecord("x", "all", 0, 0.5, RB)]
        write_embeddings(tmp_path / "e.tsv", recs, np.array([[0.25, -1.0]]), "cd" * 32)
        lines = (tmp_path / "e.tsv").read_text().splitlines()
        assert lines[1].split("\t") == ["x", "rec_bonafide", "0.25", "-1.0"]


class TestScoring:
    def test_zero_parameters_score_one_half(self, small_corpus):
        root, _ = small_corpus
        cfg = RunConfig()
        rows = read_manifest(root / "manifest.tsv")[:3]
        params = {k: np.zeros_like(v) for k, v in init_params(cfg).items()}
        scored = score_manifest(rows, params, cfg)
        assert [r.score for r in scored.records] == [0.5] * 3
        assert not scored.embeddings.any() and scored.embeddings.shape == (3, 32)

    def test_missing_file_reported(self, small_corpus, tmp_path):
        root, _ = small_corpus
        cfg = RunConfig()
        rows = read_manifest(root / "manifest.tsv")[:1]
        ghost = type(rows[0])(tmp_path / "ghost.wav", Provenance.SPOOF, "all")
        scored = score_manifest(rows + [ghost], init_params(cfg), cfg)
        assert len(scored.records) == 1 and len(scored.errors) == 1 and "ghost.wav" in scored.errors[0]

    def test_report_validates_against_schema(self):
        cfg = RunConfig()
        rng = np.random.default_rng(3)
        prov = [B, S, RB, RS] * 3
        recs = [ScoreRecord(f"u{i}", "all", p.binary(), float(rng.uniform()), p) for i, p in enumerate(prov)]
        report = build_report(Scored(recs, rng.normal(size=(12, 32))), cfg)
        doc = json.loads(report.to_json())
        jsonschema.validate(doc, report_schema())
        assert doc["config_hash"] == cfg.hash() and doc["n_scored"] == 12
