import json

import numpy as np
import pytest

from botscl.graph import BOT, HUMAN, homophily_ratio
from botscl.synth import SynthProfile, builtin_profiles, generate, load_profile

# per-relation, per-class homophily of the two reference datasets
TARGETS = {
    "twibot20-like": {"follower": (0.8144, 0.2899), "following": (0.3356, 0.7527)},
    "twibot22-like": {"follower": (0.8805, 0.1655), "following": (0.9620, 0.0625)},
}


def test_builtin_targets_match_reference_values():
    profiles = builtin_profiles()
    for name, rels in TARGETS.items():
        for spec in profiles[name].relations:
            human, bot = rels[spec.name]
            assert spec.homophily_target == {"human": human, "bot": bot}
    assert profiles["twibot20-like"].bot_fraction == pytest.approx(6589 / 11826)
    assert profiles["twibot22-like"].bot_fraction == pytest.approx(0.139943)
    assert profiles["twibot22-like"].label_coverage == 1.0
    assert profiles["twibot20-like"].label_coverage == 0.3


@pytest.mark.parametrize("name", sorted(TARGETS))
def test_measured_homophily_close_to_target(name):
    g, s = generate(load_profile(name), seed=0)
    for r, rname in enumerate(g.relation_names):
        for c in (HUMAN, BOT):
            assert abs(homophily_ratio(g, s, r, c) - TARGETS[name][rname][c]) <= 0.04


def test_same_seed_is_bit_identical():
    prof = load_profile("twibot22-like").with_n(300)
    a, sa = generate(prof, 7)
    b, sb = generate(prof, 7)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.features, b.features))
    assert all(np.array_equal(x, y) for x, y in zip(a.relations, b.relations))
    assert np.array_equal(sa.labels, sb.labels) and np.array_equal(sa.train, sb.train)


def test_class_counts_within_three_sigma():
    prof = load_profile("twibot20-like")
    n, p = prof.n, prof.bot_fraction
    for seed in range(5):
        g, s = generate(prof, seed)
        cov = np.count_nonzero(s.labels >= 0)
        assert abs(cov - n * prof.label_coverage) <= 3 * np.sqrt(n * 0.3 * 0.7) + 1
        bots = np.count_nonzero(s.labels == BOT)
        sig = np.sqrt(cov * p * (1 - p))
        assert abs(bots - cov * p) <= 3 * sig + 1


def test_full_homophily_gives_no_heterophilic_edges():
    obj = json.loads(load_profile("uniform-homophilic").with_n(300).to_json())
    for rel in obj["relations"]:
        rel["homophily_target"] = {"human": 1.0, "bot": 1.0}
    g, s = generate(SynthProfile.from_dict(obj), 3)
    for r in range(g.num_relations):
        for c in (HUMAN, BOT):
            assert homophily_ratio(g, s, r, c) == 1.0


def test_splits_are_disjoint_labeled_and_cover_fractions():
    g, s = generate(load_profile("twibot22-like").with_n(500), 1)
    parts = [set(s.train.tolist()), set(s.val.tolist()), set(s.test.tolist())]
    assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
    assert sum(map(len, parts)) == 500
    assert abs(len(parts[0]) - 300) <= 2


def test_profile_json_roundtrip():
    prof = load_profile("twibot20-like")
    assert SynthProfile.from_json(prof.to_json()) == prof


@pytest.mark.parametrize(
    "field,value",
    [("bot_fraction", 1.5), ("label_coverage", 0.0), ("split_fractions", {"train": 0.5, "val": 0.2, "test": 0.2})],
)
def test_invalid_profiles_rejected(field, value):
    obj = json.loads(load_profile("twibot20-like").to_json())
    obj[field] = value
    with pytest.raises(ValueError):
        SynthProfile.from_dict(obj)


def test_unknown_profile_name():
    with pytest.raises(ValueError, match="builtins"):
        load_profile("no-such-profile")
