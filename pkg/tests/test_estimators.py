import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from worldmodel.agents import optimal_agent
from worldmodel.cmp import random_cmp, sample_trajectory
from worldmodel.estimators import FrequencyWorldModel, PolicyWorldModelExtractor
from worldmodel.extraction import ALG1


@pytest.fixture(scope="module")
def env():
    return random_cmp(5, 2, 3, 7)


class TestFrequencyWorldModel:
    def test_fit_predict(self, env):
        traj = sample_trajectory(env, None, 0, 20_000, 1)
        m = FrequencyWorldModel(5, 2).fit(traj)
        X = np.array([[0, 0], [3, 1]])
        assert m.predict_proba(X).shape == (2, 5)
        assert np.allclose(m.predict_proba(X).sum(axis=1), 1)
        assert m.predict(X).tolist() == env.transitions[X[:, 0], X[:, 1]].argmax(axis=1).tolist()
        assert m.score(env) > -0.02
        assert m.n_samples_ == 20_000

    def test_several_trajectories_pool_counts(self, env):
        ts = [sample_trajectory(env, None, 0, 100, s) for s in range(3)]
        pooled = FrequencyWorldModel(5, 2).fit(ts)
        assert pooled.visit_counts_.sum() == 300

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            FrequencyWorldModel(5, 2).predict(np.array([[0, 0]]))

    def test_bad_pairs(self, env):
        m = FrequencyWorldModel(5, 2).fit(sample_trajectory(env, None, 0, 10, 0))
        with pytest.raises(ValueError):
            m.predict(np.array([[0, 2]]))
        with pytest.raises(ValueError):
            m.predict(np.array([0, 1]))

    def test_clone_and_params(self):
        m = FrequencyWorldModel(7, 3)
        assert clone(m).get_params() == {"n_states": 7, "n_actions": 3}

    def test_agent_from_model(self, env):
        m = FrequencyWorldModel(5, 2).fit(sample_trajectory(env, None, 0, 500, 2))
        assert np.array_equal(m.to_agent().belief, m.transitions_)


class TestPolicyExtractor:
    def test_recovers_optimal_agent_model(self, env):
        est = PolicyWorldModelExtractor(5, 2, trials=100, algorithm=ALG1)
        est.fit(optimal_agent(env), truth=env)
        assert est.goal_depth_ == 201
        assert (est.report_.error <= est.report_.bound + 1e-12).all()
        assert np.allclose(est.transitions_.sum(axis=2), 1)
        assert est.score(env) == pytest.approx(-est.report_.mean_error(support_only=True))

    def test_rejects_non_policy(self):
        with pytest.raises(TypeError):
            PolicyWorldModelExtractor(2, 2).fit(np.zeros((2, 2)))

    def test_params_round_trip(self):
        est = PolicyWorldModelExtractor(4, 3, trials=9, search="linear")
        assert clone(est).get_params()["trials"] == 9
        assert clone(est).get_params()["search"] == "linear"
