import json
import math
import os

import pytest

import pmoepy


@pytest.fixture(scope="module")
def clip_path(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("clips") / "push.mclp")
    frames = pmoepy.generate_clip("push", 2.0, 7, path)
    assert frames == 60
    return path


def test_scenario_names():
    names = pmoepy.scenario_names()
    assert "push" in names
    assert "spin" in names


def test_clip_roundtrip(clip_path, tmp_path):
    info = pmoepy.clip_info(clip_path)
    assert info["frames"] == 60
    assert info["characters"] == 2
    assert info["duration"] == pytest.approx(2.0)

    again = str(tmp_path / "again.mclp")
    pmoepy.generate_clip("push", 2.0, 7, again)
    assert pmoepy.clips_equal(clip_path, again)


def test_replay_is_exact(clip_path):
    assert pmoepy.replay_deviation(clip_path) < 1e-9


def test_routing_fraction_oracles():
    assert pmoepy.routing_fraction(0.3, 0.6) == pytest.approx(0.5)
    assert pmoepy.routing_fraction(0.8, 0.5) == 1.0
    assert pmoepy.routing_fraction(0.8, 0.2, literal=True) == pytest.approx(4.0)


def test_sampling_probs_oracle():
    p = pmoepy.tracking_reward_sampling_probs([0.9, 0.5], 0.1)
    expected = 1.0 / (1.0 + math.exp(4.0))
    assert p[0] == pytest.approx(expected, abs=1e-12)
    assert sum(p) == pytest.approx(1.0, abs=1e-12)


def test_gae_oracle():
    adv = pmoepy.gae([1.0, 1.0], [0.0, 0.0], [False, True])
    assert adv[0] == pytest.approx(1.9405, abs=1e-9)
    assert adv[1] == pytest.approx(1.0, abs=1e-12)


def test_train_and_evaluate(clip_path, tmp_path):
    ckpt = str(tmp_path / "model.pmoe")
    rows = pmoepy.train([clip_path], iterations=1, seed=3,
                        checkpoint_out=ckpt, rollout_steps=64, hidden=16)
    assert len(rows) == 1
    m = rows[0]
    assert 0.0 < m["mean_r_track"] <= 1.0
    assert m["loss_total"] == pytest.approx(
        m["loss_policy"] + m["loss_value"] + 0.03 * m["loss_adapter"])

    report = json.loads(pmoepy.evaluate(ckpt, [clip_path], episodes=1))
    assert 0.0 <= report["success_rate"] <= 1.0
    assert report["mpjpe_mm"] >= 0.0
    assert report["per_clip"][0]["episodes"] == 1


def test_bundled_clips_if_present():
    clip_dir = os.environ.get("PMOE_CLIP_DIR")
    if not clip_dir or not os.path.isdir(clip_dir):
        pytest.skip("no bundled clip directory")
    clips = [f for f in os.listdir(clip_dir) if f.endswith(".mclp")]
    if not clips:
        pytest.skip("no bundled clips")
    for name in clips:
        assert pmoepy.replay_deviation(os.path.join(clip_dir, name)) < 1e-9
