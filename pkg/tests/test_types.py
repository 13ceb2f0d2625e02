"""Core type invariants and constraint/mask construction."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wsibp import (
    ConceptSpace,
    Dataset,
    HyperParams,
    LabelTuple,
    Track,
    ValidationError,
    VideoBag,
    build_constraints,
)

SPACE = ConceptSpace(3, 3, 2, {"subject": 4, "action": 3})


def make_track(gt=None):
    return Track(np.zeros(4), np.zeros(3), ground_truth=gt)


class TestTypes:
    def test_concept_space_layout(self):
        assert SPACE.num_labeled == 6
        assert list(SPACE.subject_factors()) == [0, 1, 2]
        assert list(SPACE.action_factors()) == [3, 4, 5]
        assert SPACE.action_factor(2) == 5

    def test_concept_space_rejects_bad_dims(self):
        with pytest.raises(ValidationError):
            ConceptSpace(1, 1, 0, {"subject": 0, "action": 3})
        with pytest.raises(ValidationError):
            ConceptSpace(-1, 1, 0, {"subject": 2, "action": 3})

    def test_label_tuple_requires_component(self):
        with pytest.raises(ValidationError):
            LabelTuple(None, None)
        assert LabelTuple(1, None).subject == 1
        assert not LabelTuple(None, 2).is_pair
        assert LabelTuple(0, 0).is_pair

    def test_label_range_checked_in_dataset(self):
        bag = VideoBag("v0", [make_track()], [LabelTuple(5, None)])
        with pytest.raises(ValidationError, match="out of range"):
            Dataset(SPACE, [bag])

    def test_track_rejects_non_finite(self):
        with pytest.raises(ValidationError):
            Track(np.array([1.0, np.nan, 0.0, 0.0]), np.zeros(3))

    def test_track_features_read_only(self):
        t = make_track()
        with pytest.raises(ValueError):
            t.feat_subject[0] = 1.0

    def test_bag_needs_tracks(self):
        with pytest.raises(ValidationError):
            VideoBag("v0", [], [])

    def test_dataset_dimension_message(self):
        bad = Track(np.zeros(2), np.zeros(3))
        bag = VideoBag("v0", [make_track(), bad], [])
        with pytest.raises(ValidationError, match=r"feat_subject length 2 ≠ 4 at video v0 track 1"):
            Dataset(SPACE, [bag])

    def test_dataset_rejects_duplicate_ids(self):
        bags = [VideoBag("v0", [make_track()], []), VideoBag("v0", [make_track()], [])]
        with pytest.raises(ValidationError, match="duplicate"):
            Dataset(SPACE, bags)

    def test_hyperparams_validation(self):
        hp = HyperParams(alpha=2.0, penalty_c=0.0, k_max=8)
        assert hp.sigma_n2 == {"subject": 1.0, "action": 1.0}
        with pytest.raises(ValidationError):
            HyperParams(alpha=0.0)
        with pytest.raises(ValidationError):
            HyperParams(penalty_c=-1.0)
        with pytest.raises(ValidationError):
            HyperParams(sigma_n2={"subject": 0.0, "action": 1.0})
        with pytest.raises(ValidationError):
            HyperParams(k_max=4).check_k_max(SPACE)


class TestBuildConstraints:
    def test_pair_example(self):
        # one pair label (classes 0 and 1): its two factors plus all background
        bag = VideoBag("v0", [make_track()], [LabelTuple(0, 1)])
        cset = build_constraints(bag, SPACE, k_max=10)
        assert cset.pair_constraints == [(0, 1)]
        assert cset.singleton_subject == [] and cset.singleton_action == []
        expected = np.zeros(10)
        expected[0] = 1.0          # subject class 0
        expected[3 + 1] = 1.0      # action class 1 sits after the 3 subjects
        expected[6:] = 1.0         # background factors always admissible
        np.testing.assert_array_equal(cset.mask, expected)

    def test_singleton_subject_example(self):
        bag = VideoBag("v0", [make_track()], [LabelTuple(1, None)])
        cset = build_constraints(bag, SPACE, k_max=10)
        assert cset.pair_constraints == []
        assert cset.singleton_subject == [1]
        assert np.all(cset.mask[3:6] == 0.0)  # no action factor admitted
        assert cset.mask[1] == 1.0

    def test_empty_labels_example(self):
        bag = VideoBag("v0", [make_track()], [])
        cset = build_constraints(bag, SPACE, k_max=10)
        assert cset.pair_constraints == []
        assert np.all(cset.mask[:6] == 0.0)
        assert np.all(cset.mask[6:] == 1.0)

    def test_duplicates_collapse(self):
        bag = VideoBag("v0", [make_track()], [LabelTuple(0, 1), LabelTuple(0, 1), LabelTuple(2, None)])
        cset = build_constraints(bag, SPACE, k_max=8)
        assert cset.pair_constraints == [(0, 1)]
        assert cset.singleton_subject == [2]

    def test_out_of_range_names_bag(self):
        bag = VideoBag("vX", [make_track()], [LabelTuple(None, 7)])
        with pytest.raises(ValidationError, match="'vX'"):
            build_constraints(bag, SPACE, k_max=10)

    def test_k_max_too_small(self):
        bag = VideoBag("v0", [make_track()], [])
        with pytest.raises(ValidationError):
            build_constraints(bag, SPACE, k_max=5)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(
        st.tuples(
            st.one_of(st.none(), st.integers(0, 2)),
            st.one_of(st.none(), st.integers(0, 2)),
        ).filter(lambda p: p != (None, None)),
        max_size=6,
    ))
    def test_mask_matches_mentioned_classes(self, raw):
        labels = [LabelTuple(s, a) for s, a in raw]
        bag = VideoBag("v0", [make_track()], labels)
        cset = build_constraints(bag, SPACE, k_max=9)
        mentioned = set()
        for lab in labels:
            if lab.subject is not None:
                mentioned.add(SPACE.subject_factor(lab.subject))
            if lab.action is not None:
                mentioned.add(SPACE.action_factor(lab.action))
        assert {k for k in range(6) if cset.mask[k] == 1.0} == mentioned
        assert np.all(cset.mask[6:] == 1.0)
        for (s, a) in cset.pair_constraints:
            assert cset.mask[SPACE.subject_factor(s)] == 1.0
            assert cset.mask[SPACE.action_factor(a)] == 1.0
        for s in cset.singleton_subject:
            assert cset.mask[SPACE.subject_factor(s)] == 1.0
        for a in cset.singleton_action:
            assert cset.mask[SPACE.action_factor(a)] == 1.0
