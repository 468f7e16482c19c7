import numpy as np
import pytest

from adaptive_distill.exceptions import InputError
from adaptive_distill.semisup import (
    MixConfig,
    assemble_manifest,
    build_routes,
    filter_unlabeled,
    mix_pools,
    read_manifest,
    write_manifest,
)
from adaptive_distill.teacher import Detection, TargetRecord


def record(sid, n):
    hard = [Detection(0, (1.0, 1.0, 3.0, 3.0), 0.9)] * n
    return TargetRecord(sid, hard, np.zeros((4, 2), np.float32))


POS = [f"p{i:03d}" for i in range(100)]
NEG = [f"n{i:03d}" for i in range(100)]


def test_partition():
    recs = [record(f"u{i}", i % 3) for i in range(30)][::-1]
    pos, neg = filter_unlabeled(recs)
    assert len(pos) + len(neg) == 30 and not set(pos) & set(neg)
    assert pos == sorted(pos) and len(neg) == 10
    assert filter_unlabeled(recs[::-1]) == (pos, neg)


@pytest.mark.parametrize("rho,n_pos", [(0.0, 0), (1.0, 40), (0.5, 20), (0.25, 10)])
def test_mix_counts(rho, n_pos):
    ids = mix_pools(POS, NEG, MixConfig(rho, 40, 7))
    assert len(ids) == len(set(ids)) == 40
    assert sum(i.startswith("p") for i in ids) == n_pos


def test_mix_deterministic():
    assert mix_pools(POS, NEG, MixConfig(0.5, 30, 3)) == mix_pools(POS[::-1], NEG, MixConfig(0.5, 30, 3))
    assert mix_pools(POS, NEG, MixConfig(0.5, 30, 3)) != mix_pools(POS, NEG, MixConfig(0.5, 30, 4))


def test_mix_uniform():
    # inclusion frequency of each positive id over reseeds: n/N = 0.2
    draws = 200
    hits = np.zeros(len(POS))
    for seed in range(draws):
        for sid in mix_pools(POS, NEG, MixConfig(0.5, 40, seed))[:20]:
            hits[int(sid[1:])] += 1
    p = 20 / len(POS)
    sigma = np.sqrt(draws * p * (1 - p))
    assert hits.sum() == draws * 20
    assert np.count_nonzero(np.abs(hits - draws * p) > 3 * sigma) <= 2


def test_mix_errors():
    with pytest.raises(InputError):
        mix_pools(POS[:5], NEG, MixConfig(1.0, 10))
    with pytest.raises(InputError):
        MixConfig(1.5, 10)
    with pytest.raises(InputError):
        MixConfig(0.5, -1)


@pytest.mark.parametrize("mode,n_unl,soft_l,soft_u", [
    ("supervised", 0, False, None), ("distill", 0, True, None),
    ("semisup-hard-only", 3, False, False), ("semisup-full", 3, True, True)])
def test_manifest_modes(mode, n_unl, soft_l, soft_u, tmp_path):
    m = assemble_manifest(["a", "b"], ["x", "y", "z"], mode, ["x", "y", "z"], {"teacher": "abc"})
    assert len(m.unlabeled_ids) == n_unl
    assert all(m.flags[s]["use_gt_focal"] and m.flags[s]["use_soft_adl"] == soft_l for s in m.labeled_ids)
    for s in m.unlabeled_ids:
        f = m.flags[s]
        assert f["use_hard_focal"] and f["use_hard_loc"] and not f["use_gt_focal"]
        assert f["use_soft_adl"] == soft_u
    write_manifest(tmp_path / "m.json", m)
    assert read_manifest(tmp_path / "m.json") == m


def test_manifest_errors(tmp_path):
    with pytest.raises(InputError, match="missing target record"):
        assemble_manifest(["a"], ["x", "y"], "semisup-full", ["x"])
    with pytest.raises(InputError):
        assemble_manifest(["a"], ["a"], "semisup-full", ["a"])
    with pytest.raises(InputError):
        assemble_manifest(["a"], [], "bogus")
    (tmp_path / "bad.json").write_text('{"format": "other"}')
    with pytest.raises(InputError):
        read_manifest(tmp_path / "bad.json")


def test_routes(small_scenes):
    lab, unl = small_scenes[:3], small_scenes[3:6]
    recs = {s.scene_id: record(s.scene_id, i) for i, s in enumerate(unl)}
    m = assemble_manifest([s.scene_id for s in lab], [s.scene_id for s in unl], "semisup-full", list(recs))
    scenes, routes = build_routes(m, {s.scene_id: s for s in small_scenes}, recs)
    assert [s.scene_id for s in scenes] == [s.scene_id for s in lab + unl]
    assert np.array_equal(routes[0].boxes, lab[0].boxes)
    assert [len(r.classes) for r in routes[3:]] == [0, 1, 2]
    assert all(r.use_soft for r in routes)
