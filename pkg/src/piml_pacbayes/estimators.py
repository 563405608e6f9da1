"""scikit-learn style wrappers around the two training stages.

``PINNPrior`` trains the prior network on generated physics data.
``PACBayesPosterior`` takes a fitted prior, estimates the constants, trains
the posterior mean on a surrogate bound and keeps the resulting
:class:`~piml_pacbayes.bounds.BoundReport` in ``report_``. Both predict the
field ``u(x, t)`` from an ``(n, 2)`` array and score with R^2 against targets.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import data as datamod
from .bounds import GaussianMeasure, mc_statistics
from .config import make_config
from .constants import estimate_constants
from .model import predict as model_predict
from .pde import get_benchmark
from .pipeline import fit_normalizer, heldout_splits, posterior_splits
from .posterior import SurrogateChoice, finalize_report, train_posterior
from .train import train_prior


def _check_points(X):
    X = check_array(X, dtype=np.float64)
    if X.shape[1] != 2:
        raise ValueError(f"expected (x, t) columns, got {X.shape[1]} features")
    return X


class PINNPrior(RegressorMixin, BaseEstimator):
    """Physics-only network trained on sampled collocation points."""

    def __init__(self, benchmark="wave1d", hidden=(32, 32), n_iter=None, learning_rate=1e-3, batch_size=128,
                 loss_weighting="none", physics_sizes=(500, 1000, 1500, 2000), data_sizes=(0, 500, 1500, 2000),
                 random_state=0):
        self.benchmark = benchmark
        self.hidden = hidden
        self.n_iter = n_iter
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.loss_weighting = loss_weighting
        self.physics_sizes = physics_sizes
        self.data_sizes = data_sizes
        self.random_state = random_state

    def _config(self, **extra):
        kw = dict(benchmark=self.benchmark, hidden=tuple(self.hidden), n_iter_prior=self.n_iter,
                  lr_prior=self.learning_rate, batch_size=self.batch_size, loss_weighting=self.loss_weighting,
                  physics_sizes=tuple(self.physics_sizes), data_sizes=tuple(self.data_sizes),
                  seed=int(self.random_state))
        kw.update(extra)
        return make_config(**kw)

    def fit(self, X=None, y=None):
        """Generate data and train; ``X`` and ``y`` are ignored (training uses physics losses only)."""
        cfg = self._config()
        self.datasets_ = datamod.generate_all(cfg.benchmark, cfg.sizes(), cfg.seed, cfg.label_noise)
        self.normalizer_ = fit_normalizer(self.datasets_)
        result = train_prior(cfg, self.datasets_, normalizer=self.normalizer_)
        self.theta_ = result.theta
        self.history_ = result.history
        self.n_features_in_ = 2
        return self

    def predict(self, X):
        check_is_fitted(self, "theta_")
        return model_predict(self.theta_, _check_points(X), self.normalizer_)


class PACBayesPosterior(RegressorMixin, BaseEstimator):
    """Gaussian posterior around a fitted :class:`PINNPrior`, with its certified bound.

    ``fit(X, y)`` uses the observations as the data-loss posterior split;
    without them the prior's generated observations are used.
    """

    def __init__(self, prior=None, family="sobolev", mode=None, n_iter=1000, learning_rate=1e-5, delta=0.05,
                 sigma2=None, mc_draws=100, n_draw=10, random_state=0):
        self.prior = prior
        self.family = family
        self.mode = mode
        self.n_iter = n_iter
        self.learning_rate = learning_rate
        self.delta = delta
        self.sigma2 = sigma2
        self.mc_draws = mc_draws
        self.n_draw = n_draw
        self.random_state = random_state

    def fit(self, X=None, y=None):
        if self.prior is None:
            raise ValueError("PACBayesPosterior needs a fitted PINNPrior as `prior`")
        check_is_fitted(self.prior, "theta_")
        prior = self.prior
        datasets = prior.datasets_
        post_d = None
        if X is not None:
            X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
            if X.shape[1] != 2:
                raise ValueError(f"expected (x, t) columns, got {X.shape[1]} features")
            post_d = np.column_stack([X, y])
        m_d = len(post_d) if post_d is not None else None
        sizes = prior._config().data_sizes
        if m_d is not None and m_d > sizes[2]:
            sizes = (sizes[0], sizes[1], m_d, sizes[3])
        cfg = prior._config(family=self.family, mode=self.mode, n_iter_post=self.n_iter, lr_post=self.learning_rate,
                            delta=self.delta, sigma2=self.sigma2, mc_draws=self.mc_draws, n_draw=self.n_draw,
                            data_sizes=sizes, m_d=m_d)
        cfg = cfg.replace(seed=int(self.random_state))
        b = get_benchmark(cfg.benchmark)
        norm = prior.normalizer_
        self.constants_ = {lid: estimate_constants(prior.theta_, b, lid, ds.split("calibration"), cfg, norm)
                           for lid, ds in datasets.items()}
        post = posterior_splits(datasets, cfg)
        if post_d is not None:
            post["d"] = post_d
        prior_stats = mc_statistics(GaussianMeasure(prior.theta_, cfg.sigma_sq), b, post, cfg.mc_draws,
                                    cfg.seed, norm)
        choice = SurrogateChoice(cfg.family, cfg.surrogate_mode)
        result = train_posterior(prior.theta_, self.constants_, post, choice, cfg, normalizer=norm,
                                 prior_grad_sums={l: s.mean_grad_sum for l, s in prior_stats.items()})
        self.theta_ = result.theta
        self.history_ = result.history
        self.report_ = finalize_report(result.theta, prior.theta_, self.constants_, post, heldout_splits(datasets),
                                       cfg, norm, prior_stats, meta={"config_hash": cfg.digest(), "seed": cfg.seed})
        self.bound_ = self.report_.headline(cfg.family)
        self.n_features_in_ = 2
        return self

    def predict(self, X):
        """Field at the posterior mean."""
        check_is_fitted(self, "theta_")
        return model_predict(self.theta_, _check_points(X), self.prior.normalizer_)
