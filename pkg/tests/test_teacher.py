import struct

import numpy as np
import pytest

from sortrl import numerics as nx
from sortrl.envs import ObsNormalizer, make_env
from sortrl.teacher import (DatasetError, ExpertDataset, QNetwork, ReplayBuffer, ScriptedCartPoleExpert, Teacher,
                            TeacherConfig, UsageError, build_dataset, episode_seed, greedy_returns, train_teacher)


@pytest.fixture(scope="module")
def expert():
    return ScriptedCartPoleExpert(ObsNormalizer.from_stats([0.0, 0.0, 0.0, 0.0], [0.5, 1.0, 0.01, 0.5]))


@pytest.fixture(scope="module")
def dataset(expert):
    return build_dataset(expert, "cartpole", n_states=1200, seed=3)


# -- networks and buffer ---------------------------------------------------

def test_qnetwork_outputs_finite_vector():
    q = QNetwork(4, 2, (8, 8), seed=0)
    out = q.q_values(np.random.default_rng(0).normal(size=(5, 4)))
    assert out.shape == (5, 2) and np.all(np.isfinite(out))
    assert q.q_values(np.zeros(4)).shape == (2,)


def test_qnetwork_gradients():
    q = QNetwork(3, 2, (5,), seed=1)
    x = np.random.default_rng(1).normal(size=(4, 3))
    w = q.params["fc0.w"]

    def f(v):
        saved = w.data.copy()
        w.data[:] = v
        val = nx.sum_(q.forward(x)).item()
        w.data[:] = saved
        return val

    loss = nx.sum_(q.forward(x))
    loss.backward()
    np.testing.assert_allclose(w.grad, nx.numeric_grad(f, w.data.copy(), 1e-6), atol=1e-6)


def test_replay_buffer_ring_and_seeded_sampling():
    a, b = ReplayBuffer(5, 2, seed=9), ReplayBuffer(5, 2, seed=9)
    for i in range(8):
        for buf in (a, b):
            buf.add([i, i], i % 2, float(i), [i + 1, i + 1], 0.0)
    assert len(a) == 5
    assert sorted(a.rewards) == [3.0, 4.0, 5.0, 6.0, 7.0]
    for x, y in zip(a.sample(16), b.sample(16)):
        np.testing.assert_array_equal(x, y)


# -- teacher training ------------------------------------------------------

def test_zero_step_teacher_is_unaccepted_and_refused():
    teacher, norm, rows = train_teacher("cartpole", TeacherConfig(total_steps=0), seed=0)
    assert not teacher.accepted and norm.frozen and rows == []
    with pytest.raises(UsageError):
        build_dataset(teacher, "cartpole", n_states=10)


def test_short_training_is_deterministic(tmp_path):
    cfg = TeacherConfig(total_steps=1500, learning_starts=200, eval_every=500, eval_episodes=2,
                        accept_episodes=2, hidden=(16,))
    blobs = []
    for k in range(2):
        teacher, _, rows = train_teacher("cartpole", cfg, seed=4, require_acceptance=False)
        teacher.save(tmp_path / f"t{k}.bin")
        blobs.append((tmp_path / f"t{k}.bin").read_bytes())
        assert [r.step for r in rows] == [500, 1000, 1500]
    assert blobs[0] == blobs[1]


def test_failed_training_raises():
    from sortrl.teacher import TeacherTrainingError
    cfg = TeacherConfig(total_steps=300, learning_starts=100, eval_every=300, eval_episodes=1,
                        accept_episodes=2, hidden=(8,))
    with pytest.raises(TeacherTrainingError):
        train_teacher("cartpole", cfg, seed=0)


def test_teacher_checkpoint_round_trip(tmp_path):
    norm = ObsNormalizer.from_stats([0.1, 0.2, 0.3, 0.4], [1.0, 2.0, 3.0, 4.0])
    teacher = Teacher(QNetwork(4, 2, (6, 5), seed=2), norm, "cartpole", accepted=True, eval_return=480.0)
    teacher.save(tmp_path / "t.bin")
    back = Teacher.load(tmp_path / "t.bin", "cartpole")
    assert back.accepted and back.eval_return == 480.0 and back.qnet.hidden == (6, 5)
    np.testing.assert_array_equal(back.normalizer.mean, norm.mean)
    x = np.random.default_rng(2).normal(size=(10, 4))
    np.testing.assert_array_equal(back.scores(x), teacher.scores(x))


def test_scripted_expert_solves_cartpole(expert):
    returns = greedy_returns(expert, "cartpole", expert.normalizer, range(20))
    assert returns.mean() >= 475


# -- dataset ---------------------------------------------------------------

def test_dataset_size_and_actions(dataset):
    assert len(dataset) == 1200
    assert set(np.unique(dataset.actions)) <= {0, 1}
    assert dataset.states.shape == (1200, 4)


def test_dataset_self_consistency(dataset, expert):
    np.testing.assert_array_equal(expert.act(dataset.states), dataset.actions)


def test_dataset_states_resimulate_exactly(dataset, expert):
    env = make_env("cartpole")
    obs = env.reset(seed=episode_seed(3, 0))
    for i in range(len(dataset)):
        np.testing.assert_array_equal(expert.normalizer(obs), dataset.states[i])
        obs, _, done = env.step(int(dataset.actions[i]))
        if done:
            break


def test_dataset_requires_frozen_normalizer():
    unfrozen = ObsNormalizer(4)
    with pytest.raises(UsageError):
        build_dataset(ScriptedCartPoleExpert(unfrozen), "cartpole", n_states=5)


def test_empty_dataset(expert):
    ds = build_dataset(expert, "cartpole", n_states=0)
    assert len(ds) == 0
    assert len(ExpertDataset.from_bytes(ds.to_bytes())) == 0


def test_dataset_binary_layout(dataset):
    blob = dataset.to_bytes()
    assert blob[:4] == b"SRTD"
    version, name_len = struct.unpack_from("<II", blob, 4)
    assert (version, blob[12:12 + name_len]) == (1, b"cartpole")
    n_actions, obs_dim, count = struct.unpack_from("<IIQ", blob, 12 + name_len)
    assert (n_actions, obs_dim, count) == (2, 4, 1200)
    header = 12 + name_len + 16 + 2 * 8 * obs_dim
    assert len(blob) == header + count * (8 * obs_dim + 4)
    first = np.frombuffer(blob, "<f8", obs_dim, header)
    np.testing.assert_array_equal(first, dataset.states[0])


def test_dataset_round_trip(tmp_path, dataset):
    dataset.save(tmp_path / "d.bin")
    back = ExpertDataset.load(tmp_path / "d.bin")
    np.testing.assert_array_equal(back.states, dataset.states)
    np.testing.assert_array_equal(back.actions, dataset.actions)
    np.testing.assert_array_equal(back.normalizer.var, dataset.normalizer.var)
    assert back.env_name == "cartpole" and back.normalizer.frozen


def test_dataset_rejects_corruption(dataset):
    blob = dataset.to_bytes()
    with pytest.raises(DatasetError):
        ExpertDataset.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(DatasetError):
        ExpertDataset.from_bytes(blob[:-3])
    with pytest.raises(DatasetError):
        ExpertDataset(np.zeros((1, 4)), np.array([2]), "cartpole", 2, ObsNormalizer.identity(4))


def test_dataset_csv_mirrors_binary(tmp_path, dataset):
    dataset.to_csv(tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "env,cartpole,n_actions,2"
    assert len(lines) == 4 + len(dataset)
    row = lines[4].split(",")
    np.testing.assert_array_equal([float(v) for v in row[:4]], dataset.states[0])
    assert int(row[4]) == dataset.actions[0]
