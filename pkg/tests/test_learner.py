import io

import numpy as np
import pytest

import rsp.learner as learner
from rsp.dataset import RelabelSpec, fit_normalizer, gcsl_dataset, relabel_dataset
from rsp.envs import PRESETS, Controller, Trajectory, make_maze, scripted_collect
from rsp.errors import ConfigError, FormatError
from rsp.learner import (
    Bundle,
    DynamicsStack,
    TrainConfig,
    bundle_bytes,
    bundle_nbytes,
    load_bundle,
    parse_bundle,
    save_bundle,
    train_dynamics_stack,
    train_gcsl,
    train_policy,
    train_rsp,
)
from rsp.nn import mlp_init, mlp_predict

TINY = dict(hidden=(16, 16), batch_size=32)


def tiny_cfg(**kw):
    return TrainConfig(**{**TINY, "total_steps": 20, **kw})


@pytest.fixture(scope="module")
def umaze_data():
    trajs = scripted_collect(make_maze("umaze"), "diverse", 12, 120, seed=0)
    return trajs, fit_normalizer(trajs)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(hidden=(8,))
    with pytest.raises(ConfigError):
        TrainConfig(dropout=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(total_steps=0)
    assert TrainConfig.desk().hidden == (256, 256)


def test_shape_rules(umaze_data):
    trajs, norm = umaze_data
    spec = RelabelSpec(16, 2)
    stack, pol, _ = train_rsp(relabel_dataset(trajs, spec), tiny_cfg(total_steps=2), norm)
    assert [m.in_dim for m in stack.models] == [6, 10]
    assert stack.models[1].in_dim == 2 * 4 + 2
    assert all(m.out_dim == 4 for m in stack.models)
    assert pol.net.in_dim == 3 * 4 + 2 and pol.net.out_dim == 2
    spec1 = RelabelSpec(8, 1)
    pol1, _ = train_policy(relabel_dataset(trajs, spec1), tiny_cfg(total_steps=2), norm)
    assert pol1.net.in_dim == 2 * 4 + 2
    gcsl, _ = train_gcsl(trajs, tiny_cfg(total_steps=2), norm)
    assert gcsl.net.in_dim == 4 + 2 and gcsl.n_levels == 0


def test_stack_rejects_wrong_dims(umaze_data):
    _, norm = umaze_data
    with pytest.raises(ConfigError):
        DynamicsStack([mlp_init([6, 8, 8, 4], 0)], RelabelSpec(8, 2), norm)
    with pytest.raises(ConfigError):
        DynamicsStack([mlp_init([7, 8, 8, 4], 0)], RelabelSpec(8, 1), norm)


@pytest.fixture(scope="module")
def medium_states():
    m = make_maze("medium")
    return scripted_collect(m, "diverse", 40, 200, seed=0), scripted_collect(m, "diverse", 10, 200, seed=50)


def with_constant_actions(trajs, c):
    return [Trajectory(t.states, np.tile(np.asarray(c, np.float32), (len(t), 1))) for t in trajs]


# Adam keeps nudging weights that the data does not pin down, so a handful of
# held-out inputs can sit a little off the constant; the bulk must be on it.
def assert_near_constant(pred, c):
    err = np.abs(pred - c).max(axis=1)
    assert np.percentile(err, 99) < 1e-2
    assert np.abs(pred.mean(axis=0) - c).max() < 1e-3


CONST_CFG = dict(total_steps=6000, lr_max=3e-3, hidden=(16, 16), batch_size=128)


def test_policy_learns_constant_action(medium_states):
    c = [0.3, -0.6]
    train, held = (with_constant_actions(t, c) for t in medium_states)
    norm = fit_normalizer(train)
    spec = RelabelSpec(4, 1)
    pol, _ = train_policy(relabel_dataset(train, spec), TrainConfig(**CONST_CFG), norm)
    x = learner._kappa_matrix(*learner._normalised_columns(relabel_dataset(held, spec), norm), spec.N)
    assert_near_constant(mlp_predict(pol.net, x), c)


def test_gcsl_learns_constant_action(medium_states):
    c = [-0.25, 0.75]
    train, held = (with_constant_actions(t, c) for t in medium_states)
    norm = fit_normalizer(train)
    pol, _ = train_gcsl(train, TrainConfig(**CONST_CFG), norm)
    s, _, e = gcsl_dataset(held, np.random.default_rng(0))
    x = np.concatenate([norm.norm_state(s), norm.norm_goal(e)], axis=1)
    assert_near_constant(mlp_predict(pol.net, x), c)


def test_static_agent_dynamics_identity():
    # a motionless agent: every sub-goal equals the current state
    rng = np.random.default_rng(0)
    trajs = []
    for _ in range(400):
        p = rng.uniform(1, 5, 2)
        s = np.tile(np.r_[p, 0, 0].astype(np.float32), (10, 1))
        trajs.append(Trajectory(s, np.zeros((10, 2), np.float32)))
    norm = fit_normalizer(trajs)
    spec = RelabelSpec(8, 1)
    stack, _ = train_dynamics_stack(relabel_dataset(trajs, spec), TrainConfig(**CONST_CFG), norm)
    s = np.c_[rng.uniform(1, 5, (200, 2)), np.zeros((200, 2))].astype(np.float32)
    x = np.concatenate([norm.norm_state(s), norm.norm_goal(s[:, :2])], axis=1)
    assert np.mean((mlp_predict(stack.models[0], x) - norm.norm_state(s)) ** 2) < 1e-3


def test_joint_run_equals_separate_runs(umaze_data):
    trajs, norm = umaze_data
    data = relabel_dataset(trajs, RelabelSpec(16, 3))
    cfg = tiny_cfg(total_steps=30, dropout=0.2)
    stack, pol, trace = train_rsp(data, cfg, norm)
    stack2, _ = train_dynamics_stack(data, cfg, norm)
    pol2, _ = train_policy(data, cfg, norm)
    for a, b in zip(stack.models + [pol.net], stack2.models + [pol2.net]):
        for p, q in zip(a.params(), b.params()):
            assert p.tobytes() == q.tobytes()
    assert trace.names == ["f1", "f2", "f3", "pi"]
    assert trace.losses.shape == (30, 4)


def test_teacher_forcing_inputs_are_dataset_rows(umaze_data, monkeypatch):
    trajs, norm = umaze_data
    spec = RelabelSpec(16, 2)
    data = relabel_dataset(trajs, spec)
    seen = []
    real = learner.mlp_forward

    def spy(net, x, **kw):
        seen.append((net.in_dim, np.array(x)))
        return real(net, x, **kw)

    monkeypatch.setattr(learner, "mlp_forward", spy)
    train_rsp(data, tiny_cfg(total_steps=5), norm)
    s, sub, g = learner._normalised_columns(data, norm)
    truth = {n: {r.tobytes() for r in learner._kappa_matrix(s, sub, g, n)} for n in range(spec.N + 1)}
    width = {6: 0, 10: 1, 14: 2}
    assert len(seen) == 5 * 3
    for w, x in seen:
        assert all(r.tobytes() in truth[width[w]] for r in x.astype(np.float32))


def test_training_is_bit_deterministic(umaze_data):
    trajs, norm = umaze_data
    spec = RelabelSpec(8, 2)

    def run():
        data = relabel_dataset(trajs, spec, np.random.default_rng(0))
        stack, pol, _ = train_rsp(data, tiny_cfg(dropout=0.1, seed=4), norm)
        return bundle_bytes(Bundle(stack, pol, spec, norm))

    assert run() == run()


def test_seeds_differ(umaze_data):
    trajs, norm = umaze_data
    data = relabel_dataset(trajs, RelabelSpec(8, 1))
    a, _ = train_policy(data, tiny_cfg(seed=0), norm)
    b, _ = train_policy(data, tiny_cfg(seed=1), norm)
    assert a.net.weights[0].tobytes() != b.net.weights[0].tobytes()


@pytest.fixture(scope="module")
def bundle(umaze_data):
    trajs, norm = umaze_data
    spec = RelabelSpec(16, 2)
    stack, pol, _ = train_rsp(relabel_dataset(trajs, spec), tiny_cfg(), norm)
    return Bundle(stack, pol, spec, norm, {"note": "x"})


def test_bundle_round_trip(tmp_path, bundle):
    path = tmp_path / "b.rspb"
    save_bundle(path, bundle)
    back = load_bundle(path)
    assert back.kind == "rsp" and back.spec == bundle.spec and back.norm == bundle.norm
    assert back.meta == {"note": "x"}
    x = np.random.default_rng(0).standard_normal((100, 14)).astype(np.float32)
    assert np.array_equal(mlp_predict(back.policy.net, x), mlp_predict(bundle.policy.net, x))
    for a, b in zip(back.stack.models, bundle.stack.models):
        xi = x[:, : a.in_dim]
        assert np.array_equal(mlp_predict(a, xi), mlp_predict(b, xi))
    assert bundle_bytes(back) == path.read_bytes()


def test_gcsl_bundle_round_trip(umaze_data):
    trajs, norm = umaze_data
    pol, _ = train_gcsl(trajs, tiny_cfg(), norm)
    b = parse_bundle(bundle_bytes(Bundle(None, pol, None, norm)))
    assert b.kind == "gcsl" and b.stack is None and b.policy.n_levels == 0


def _retitle(raw: bytes, old: bytes, new: bytes) -> bytes:
    """Edit the JSON header in place, fixing up its length prefix."""
    hlen = int.from_bytes(raw[5:9], "little")
    header = raw[9 : 9 + hlen].replace(old, new)
    return raw[:5] + len(header).to_bytes(4, "little") + header + raw[9 + hlen :]


def test_bundle_tampered_depth(bundle):
    raw = bundle_bytes(bundle)
    bad = _retitle(raw, b'"N": 2', b'"N": 1')
    with pytest.raises(FormatError, match="n_models"):
        parse_bundle(bad)


def test_bundle_tampered_dims(bundle):
    raw = bundle_bytes(bundle)
    bad = _retitle(raw, b'[6, 16, 16, 4]', b'[6, 16, 16, 5]')
    with pytest.raises(FormatError, match="model_dims"):
        parse_bundle(bad)


def test_bundle_bad_magic(bundle):
    with pytest.raises(FormatError, match="offset 0"):
        parse_bundle(b"XXXXX" + bundle_bytes(bundle)[5:])


def test_bundle_size_closed_form(bundle):
    raw = bundle_bytes(bundle)
    hlen = int.from_bytes(raw[5:9], "little")
    models = bundle.stack.models + [bundle.policy.net]
    # walk the per-model headers to read their lengths
    pos, mh = 9 + hlen, []
    for m in models:
        h = int.from_bytes(raw[pos + 5 : pos + 9], "little")
        mh.append(h)
        pos += 9 + h + 4 * sum(a * b + b for a, b in zip(m.layer_dims, m.layer_dims[1:]))
    assert pos == len(raw)
    assert len(raw) == bundle_nbytes(hlen, [m.layer_dims for m in models], mh)


def test_loss_trace_csv(bundle, umaze_data):
    trajs, norm = umaze_data
    _, _, trace = train_rsp(relabel_dataset(trajs, RelabelSpec(8, 1)), tiny_cfg(total_steps=7), norm)
    buf = io.StringIO()
    trace.to_csv(buf)
    rows = buf.getvalue().strip().splitlines()
    assert rows[0] == "step,model_id,loss"
    assert len(rows) == 1 + 7 * 2
    sm = trace.smoothed(3)
    assert sm[2, 0] == pytest.approx(trace.losses[:3, 0].mean())


@pytest.mark.parametrize("name", PRESETS)
def test_loss_descends_on_presets(name):
    m = make_maze(name)
    trajs = scripted_collect(m, "diverse", 16, 300, seed=0)
    norm = fit_normalizer(trajs)
    _, _, trace = train_rsp(relabel_dataset(trajs, RelabelSpec(32, 2)),
                            TrainConfig(total_steps=5000, hidden=(32, 32), batch_size=64), norm)
    sm = trace.smoothed(100)
    assert np.all(sm[4999] < sm[100])


@pytest.fixture(scope="module")
def corridor():
    m = make_maze("corridor")
    train = scripted_collect(m, "diverse", 64, 500, seed=0)
    held = scripted_collect(m, "diverse", 32, 500, seed=100)
    return train, held, fit_normalizer(train)


def _variance_ratio(pred, target):
    """Vector NMSE in raw units: mean squared error norm over the target's total variance."""
    return np.sum(np.mean((pred - target) ** 2, axis=0)) / np.sum(np.var(target, axis=0))


def test_corridor_rsp_beats_variance_baselines(corridor):
    train, held, norm = corridor
    spec = RelabelSpec(32, 1)
    stack, pol, _ = train_rsp(relabel_dataset(train, spec), TrainConfig.desk(total_steps=10_000), norm)
    hd = relabel_dataset(held, spec)
    s, sub, g = learner._normalised_columns(hd, norm)
    x0 = learner._kappa_matrix(s, sub, g, 0)
    pred = norm.denorm_state(mlp_predict(stack.models[0], x0))
    assert _variance_ratio(pred, hd.subgoals[:, 0]) < 0.2
    x1 = learner._kappa_matrix(s, sub, g, 1)
    assert _variance_ratio(mlp_predict(pol.net, x1), hd.a) < 0.3


def test_corridor_action_noise_floor(corridor):
    # the logged actions carry behavior noise no policy can predict; the noise-free
    # controller is the best possible predictor, and it must sit well under 0.3
    _, held, _ = corridor
    m, ctrl, rng = make_maze("corridor"), Controller(noise=0.0), np.random.default_rng(0)
    clean, logged = [], []
    for tr in held:
        target = tr.meta["targets"][0]
        for s, a in zip(tr.states, tr.actions):
            clean.append(ctrl.action(m, s, target, m.cell_of(target), rng))
            logged.append(a)
    assert _variance_ratio(np.array(clean), np.array(logged)) < 0.15


def test_corridor_gcsl_beats_variance_baseline(corridor):
    train, held, norm = corridor
    pol, _ = train_gcsl(train, TrainConfig.desk(total_steps=10_000), norm)
    s, a, e = gcsl_dataset(held, np.random.default_rng(0))
    x = np.concatenate([norm.norm_state(s), norm.norm_goal(e)], axis=1)
    assert _variance_ratio(mlp_predict(pol.net, x), a) < 0.4
