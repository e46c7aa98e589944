import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foleygen.errors import ConfigurationError, InputError
from foleygen.jointembed import JointEmbedConfig, JointEmbedModel
from foleygen.selector import (
    Candidate,
    FilterPolicy,
    Target,
    apply_threshold_filter,
    build_motor_reference,
    default_thresholds,
    fad_style_score,
    score_candidates,
    select_outputs,
    select_reference,
    write_scores_csv,
)
from foleygen.specops import LOG_FLOOR


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


def scored(values, names=("t",)):
    cands = []
    for i, row in enumerate(values):
        row = row if isinstance(row, (tuple, list)) else (row,)
        cands.append(Candidate(f"c{i}", i, np.zeros(2), scores=dict(zip(names, row))))
    return cands


TARGET = [Target("t", np.array([1.0, 0.0]))]


class TestScoring:
    def test_identical_and_orthogonal(self):
        cands = [Candidate("a", 0, np.array([1.0, 0.0])), Candidate("b", 1, np.array([0.0, 1.0]))]
        score_candidates(cands, TARGET)
        assert cands[0].scores["t"] == pytest.approx(1.0)
        assert cands[1].scores["t"] == 0.0

    def test_brute_force(self):
        rng = np.random.default_rng(0)
        cands = [Candidate(f"c{i}", i, unit(rng.normal(size=5))) for i in range(3)]
        targets = [Target(f"t{j}", unit(rng.normal(size=5))) for j in range(2)]
        out = score_candidates(cands, targets)
        assert [c.candidate_id for c in out] == ["c0", "c1", "c2"]
        for c in out:
            assert len(c.scores) == 2
            for t in targets:
                assert abs(c.scores[t.name] - float(sum(a * b for a, b in zip(c.audio_embedding, t.vector)))) <= 1e-9

    def test_empty_targets(self):
        with pytest.raises(InputError):
            score_candidates([Candidate("a", 0, np.ones(2))], [])

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            score_candidates([Candidate("a", 0, np.ones(3))], TARGET)

    def test_fad_style_score(self):
        e = unit([1.0, 1.0])
        assert fad_style_score(e, e) == 1.0
        assert fad_style_score(np.array([1.0, 0]), np.array([-1.0, 0])) == -1.0
        # For unit vectors the score equals the cosine.
        a, b = unit([1.0, 2.0]), unit([3.0, -1.0])
        assert fad_style_score(a, b) == pytest.approx(float(a @ b))


class TestFilter:
    def test_threshold_example(self):
        out = apply_threshold_filter(scored([0.9, 0.4, 0.7]), FilterPolicy({"k": 0.6}), "k", TARGET)
        assert [c.candidate_id for c in out.accepted] == ["c0", "c2"] and not out.fallback

    def test_conjunctive_example(self):
        targets = [Target("a", np.zeros(2)), Target("b", np.zeros(2))]
        policy = FilterPolicy({"k": 0.7}, "conjunctive", tuple(targets))
        out = apply_threshold_filter(scored([(0.8, 0.5), (0.9, 0.9)], ("a", "b")), policy, "k")
        assert [c.candidate_id for c in out.accepted] == ["c1"]

    def test_fallback(self):
        out = apply_threshold_filter(scored([0.1, 0.3, 0.2]), FilterPolicy({"k": 0.9}), "k", TARGET)
        assert out.fallback and [c.candidate_id for c in out.accepted] == ["c1"]
        out = apply_threshold_filter(scored([0.1]), FilterPolicy({"k": 0.9}), "k", TARGET, fallback=False)
        assert out.accepted == []

    def test_threshold_inclusive(self):
        out = apply_threshold_filter(scored([0.5]), FilterPolicy({"k": 0.5}), "k", TARGET)
        assert len(out.accepted) == 1 and not out.fallback

    @pytest.mark.parametrize("kwargs", [dict(thresholds={"k": 1.5}), dict(thresholds={}, mode="fuzzy"),
                                        dict(thresholds={}, mode="conjunctive"), dict(thresholds={}, max_resample_rounds=0)])
    def test_policy_validation(self, kwargs):
        with pytest.raises(ConfigurationError):
            FilterPolicy(**kwargs)

    def test_missing_threshold(self):
        with pytest.raises(ConfigurationError):
            apply_threshold_filter(scored([0.5]), FilterPolicy({}), "k", TARGET)

    def test_select_outputs_ties(self):
        out = select_outputs(scored([0.5, 0.9, 0.5, 0.7]), 3, TARGET)
        assert [c.candidate_id for c in out] == ["c1", "c3", "c0"]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=20), st.floats(-1, 1), st.floats(-1, 1))
def test_monotone_subset_never_empty(scores, t1, t2):
    lo, hi = sorted((t1, t2))
    cands = scored(scores)
    keep_lo = {c.candidate_id for c in apply_threshold_filter(cands, FilterPolicy({"k": lo}), "k", TARGET, False).accepted}
    keep_hi = {c.candidate_id for c in apply_threshold_filter(cands, FilterPolicy({"k": hi}), "k", TARGET, False).accepted}
    assert keep_hi <= keep_lo <= {c.candidate_id for c in cands}
    assert apply_threshold_filter(cands, FilterPolicy({"k": hi}), "k", TARGET).accepted


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 15), st.floats(-1, 1), st.integers(0, 2**31 - 1))
def test_conjunctive_is_intersection(n_targets, n_cands, thr, seed):
    rng = np.random.default_rng(seed)
    names = [f"t{j}" for j in range(n_targets)]
    cands = scored([tuple(rng.uniform(-1, 1, n_targets)) for _ in range(n_cands)], names)
    targets = [Target(n, np.zeros(2)) for n in names]
    conj = apply_threshold_filter(cands, FilterPolicy({"k": thr}, "conjunctive", tuple(targets)), "k", fallback=False)
    per = [
        {c.candidate_id for c in apply_threshold_filter(cands, FilterPolicy({"k": thr}), "k", [t], False).accepted}
        for t in targets
    ]
    assert {c.candidate_id for c in conj.accepted} == set.intersection(*per)


class TestReference:
    def test_planted_outlier_excluded(self):
        rng = np.random.default_rng(0)
        base = unit(rng.normal(size=8))
        embs = [unit(base + 0.1 * rng.normal(size=8)) for _ in range(12)]
        embs.insert(5, -base)
        ref = select_reference(embs, 10)
        assert 5 not in ref.indices and len(ref.references) == 10
        np.testing.assert_allclose(ref.primary, np.mean(ref.references, axis=0))

    def test_errors(self):
        with pytest.raises(InputError):
            select_reference([], 1)
        with pytest.raises(InputError):
            select_reference([np.ones(2)], 2)

    def test_from_mels(self):
        model = JointEmbedModel(JointEmbedConfig(mel_frames=16, mel_bins=16, dim=4, width=2, text_hidden=4))
        mels = LOG_FLOOR + np.random.default_rng(0).uniform(0, 5, (6, 16, 16))
        ref = build_motor_reference(mels, model, 3)
        assert len(ref.indices) == 3 and ref.primary.shape == (4,)
        with pytest.raises(InputError):
            build_motor_reference([], model, 1)


def test_default_thresholds_percentile():
    embs = {"k": [unit([1, x]) for x in np.linspace(0, 3, 9)]}
    targets = {"k": [Target("t", np.array([1.0, 0.0]))]}
    cos = [1 / np.sqrt(1 + x * x) for x in np.linspace(0, 3, 9)]
    assert default_thresholds(embs, targets, 25.0)["k"] == pytest.approx(np.percentile(cos, 25))


def test_scores_csv(tmp_path):
    path = tmp_path / "scores.csv"
    write_scores_csv(path, [("a", "t", 0.5, True)])
    write_scores_csv(path, [("b", "t", -0.25, False)])
    assert path.read_text().splitlines() == ["candidate_id,target,score,accepted", "a,t,0.500000,1", "b,t,-0.250000,0"]
