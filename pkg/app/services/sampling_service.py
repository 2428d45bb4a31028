"""
Sampling service: scheme registry, chain execution and Monte Carlo estimators.
"""

from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp
import structlog
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt

from app.errors import ConfigurationError, SamplingQualityError, ShapeError, StepSizeError
from app.free_field import counterterm
from app.lattice import LatticeSpec, laplacian_matrix
from app.models import (
    ChainConfig,
    ChainResult,
    CorrelationEstimate,
    GeneralModel,
    MomentEstimate,
    Phi4Params,
    SampleStream,
    StepHalvingReport,
)
from app.modules import BaseSamplerModule
from app.modules.heatbath_module import HeatBathModule
from app.modules.langevin_module import LangevinModule
from app.modules.metropolis_module import MetropolisModule


logger = structlog.get_logger(__name__)

MIN_EFFECTIVE_SAMPLES = 100


class SchemeRegistry:
    """Registry for sampling schemes."""

    _schemes = {
        "metropolis_site": MetropolisModule,
        "heatbath_site": HeatBathModule,
        "langevin_euler": LangevinModule,
        "metropolis": MetropolisModule,  # Alias
    }

    @classmethod
    def register(cls, name: str, module_class: type):
        """Register a new sampling scheme."""
        cls._schemes[name] = module_class

    @classmethod
    def get(cls, name: str) -> Optional[type]:
        """Get scheme class by name."""
        return cls._schemes.get(name.lower())

    @classmethod
    def list_available(cls) -> List[str]:
        """List all available schemes."""
        return list(cls._schemes.keys())


def general_model_for(params: Phi4Params) -> Tuple[GeneralModel, float]:
    """
    Map lattice phi^4 parameters onto the general measure.

    continuum:        A = eps^d (-Delta + m^2),  g = eps^d lambda,
                      nu = eps^d (mu - m^2 + a^eps + 1/t),  h -> eps^d h
    lattice_section3: A = -Delta + m^2,  g = lambda,  nu = mu - m^2 + 1/t

    Returns:
        (model, volume weight used as inverse Langevin mobility)
    """
    spec = params.spec
    identity = sp.identity(spec.n_sites, format="csr")
    kinetic = laplacian_matrix(spec) + params.m2 * identity
    h = params.h
    if params.normalisation == "continuum":
        w = spec.volume_weight
        a_eps = counterterm(spec, params.lambda_, params.m2).a_eps
        model = GeneralModel(
            A=(w * kinetic).tocsr(),
            g=w * params.lambda_,
            nu=w * (params.mu - params.m2 + a_eps + params.inverse_t),
            h=None if h is None else w * h,
        )
        return model, w
    model = GeneralModel(
        A=kinetic.tocsr(),
        g=params.lambda_,
        nu=params.mu - params.m2 + params.inverse_t,
        h=h,
    )
    return model, 1.0


def chain_key(seed: int, chain: int) -> np.ndarray:
    """128-bit Philox key of one chain, derived from the master seed."""
    return np.random.SeedSequence(seed, spawn_key=(chain,)).generate_state(2, dtype=np.uint64)


def sweep_rng(key: np.ndarray, sweep: int) -> np.random.Generator:
    """Counter-based generator for one (chain, sweep); sites index into its stream."""
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, sweep, 0]))


def _burn_in(module: BaseSamplerModule, phi: np.ndarray, key: np.ndarray, config: ChainConfig) -> Tuple[int, bool]:
    """
    Sweep until the window means of the action agree within one stderr twice
    in a row (after at least n_burn sweeps), tuning proposals per window.
    """
    if config.n_burn == 0:
        return 0, True
    window = max(config.n_burn // 4, 10)
    cap = config.max_burn_factor * config.n_burn
    sweep, stable = 0, 0
    previous: Optional[Tuple[float, float]] = None
    while sweep < cap:
        actions, acceptance = [], []
        for _ in range(window):
            acceptance.append(module.sweep(phi, sweep_rng(key, sweep)))
            actions.append(float(module.model.action(phi)))
            sweep += 1
        module.tune(float(np.mean(acceptance)))
        current = (float(np.mean(actions)), float(np.var(actions, ddof=1)) / window)
        if previous is not None:
            if abs(current[0] - previous[0]) <= np.sqrt(current[1] + previous[1]):
                stable += 1
            else:
                stable = 0
        previous = current
        if sweep >= config.n_burn and stable >= 2:
            return sweep, True
    return sweep, False


def _simulate(module: BaseSamplerModule, chain: int, config: ChainConfig) -> ChainResult:
    key = chain_key(config.seed, chain)
    phi = np.zeros(module.n_sites)
    burn_sweeps, converged = _burn_in(module, phi, key, config)
    if not converged:
        logger.warning("Burn-in cap reached before the action stabilised", chain=chain, sweeps=burn_sweeps)

    samples = np.empty((config.n_keep, module.n_sites))
    actions = np.empty(config.n_keep)
    accepted = 0.0
    sweep = burn_sweeps
    for i in range(config.n_keep):
        for _ in range(config.thin):
            accepted += module.sweep(phi, sweep_rng(key, sweep))
            sweep += 1
        samples[i] = phi
        actions[i] = module.model.action(phi)

    parameters = module.parameters()
    return ChainResult(
        chain=chain,
        samples=samples,
        actions=actions,
        acceptance=accepted / (config.n_keep * config.thin),
        proposal_width=parameters.get("proposal_width"),
        step_dt=parameters.get("step_dt"),
        burn_in_sweeps=burn_sweeps,
        burn_in_converged=converged,
    )


def _run_single_chain(model: GeneralModel, config: ChainConfig, volume_weight: float, chain: int) -> ChainResult:
    """Run one chain; Langevin divergence halves the step before giving up."""
    module_class = SchemeRegistry.get(config.scheme)
    if module_class is None:
        raise ConfigurationError(f"Unknown scheme '{config.scheme}'. Available: {SchemeRegistry.list_available()}")

    step = {"dt": config.step_dt}
    for attempt in Retrying(
        stop=stop_after_attempt(config.max_step_halvings + 1),
        retry=retry_if_exception_type(StepSizeError),
        reraise=True,
    ):
        with attempt:
            chain_config = config.model_copy(update={"step_dt": step["dt"]})
            try:
                return _simulate(module_class(model, chain_config, volume_weight), chain, chain_config)
            except StepSizeError as e:
                logger.warning("Trajectory diverged, halving step", chain=chain, step_dt=e.step_dt, sweep=e.sweep)
                step["dt"] = e.step_dt / 2.0
                raise


class SamplingService:
    """Runs chains and turns sample streams into estimates."""

    def __init__(self, workers: int = 1):
        self.workers = workers

    def run_chain(
        self,
        target: Union[Phi4Params, GeneralModel],
        config: ChainConfig,
        workers: Optional[int] = None,
    ) -> SampleStream:
        """
        Run ``config.n_chains`` independent chains.

        Args:
            target: Lattice parameters or a general model
            config: Chain settings
            workers: Process count; defaults to the service setting

        Returns:
            SampleStream with chains in index order

        Raises:
            StepSizeError: If Langevin still diverges after all step halvings
        """
        if isinstance(target, Phi4Params):
            model, volume_weight = general_model_for(target)
            spec = target.spec
        else:
            model, volume_weight, spec = target, 1.0, None

        workers = workers or self.workers
        logger.info(
            "Running chains",
            scheme=config.scheme,
            n_chains=config.n_chains,
            n_sites=model.n_sites,
            workers=workers,
            seed=config.seed,
        )
        chains = range(config.n_chains)
        if workers > 1 and config.n_chains > 1:
            with ProcessPoolExecutor(max_workers=min(workers, config.n_chains)) as pool:
                futures = [pool.submit(_run_single_chain, model, config, volume_weight, c) for c in chains]
                results = [f.result() for f in futures]
        else:
            results = [_run_single_chain(model, config, volume_weight, c) for c in chains]

        for result in results:
            logger.info(
                "Chain finished",
                chain=result.chain,
                acceptance=round(result.acceptance, 4),
                burn_in_sweeps=result.burn_in_sweeps,
            )
        return SampleStream(spec=spec, model=model, config=config, chains=results, volume_weight=volume_weight)

    @staticmethod
    def batch_means(values: np.ndarray, n_batches: int) -> np.ndarray:
        """(n_chains, n_keep, ...) -> (n_chains * n_batches, ...)"""
        n_chains, n_keep = values.shape[:2]
        batches = min(n_batches, n_keep)
        size = n_keep // batches
        trimmed = values[:, : batches * size]
        grouped = trimmed.reshape((n_chains, batches, size) + values.shape[2:])
        return grouped.mean(axis=2).reshape((n_chains * batches,) + values.shape[2:])

    def estimate_two_point(self, stream: SampleStream, spec: Optional[LatticeSpec] = None) -> CorrelationEstimate:
        """
        Translation-averaged S(r) = <phi_x phi_{x+r}> with batch-means errors.

        Raises:
            ShapeError: If the stream does not live on ``spec``
            SamplingQualityError: If the effective sample size is not positive
        """
        spec = spec or stream.spec
        if spec is None or spec.n_sites != stream.model.n_sites:
            raise ShapeError("two-point estimation needs the lattice of the stream")

        samples = stream.samples.reshape((len(stream.chains), -1) + spec.shape)
        axes = tuple(range(2, 2 + spec.d))
        spectrum = np.fft.fftn(samples, axes=axes)
        # sum_x phi(x) phi(x + r) / |Lambda|, one value per sample
        per_sample = np.fft.ifftn(np.abs(spectrum) ** 2, axes=axes).real / spec.n_sites
        chi_per_sample = spec.volume_weight * per_sample.sum(axis=axes)

        batches = self.batch_means(per_sample, stream.config.n_batches)
        chi_batches = spec.volume_weight * batches.sum(axis=tuple(range(1, 1 + spec.d)))
        n_b = batches.shape[0]
        s_hat = batches.mean(axis=0)
        stderr = batches.std(axis=0, ddof=1) / np.sqrt(n_b)
        chi_hat = float(spec.volume_weight * np.sum(s_hat))
        chi_stderr = float(chi_batches.std(ddof=1) / np.sqrt(n_b))

        n_samples = chi_per_sample.size
        variance = float(chi_per_sample.var(ddof=1))
        ess = variance / chi_stderr**2 if chi_stderr > 0 else float("nan")
        if not np.isfinite(ess) or ess <= 0:
            raise SamplingQualityError(f"effective sample size is {ess}; the stream carries no usable variation")
        ess = min(ess, float(n_samples))

        warnings = []
        if ess < MIN_EFFECTIVE_SAMPLES:
            warnings.append(f"effective sample size {ess:.1f} is below {MIN_EFFECTIVE_SAMPLES}")
            logger.warning("Low effective sample size", ess=ess, n_samples=n_samples)

        return CorrelationEstimate(
            spec=spec,
            s_hat=s_hat,
            stderr=stderr,
            chi_hat=chi_hat,
            chi_stderr=chi_stderr,
            ess=ess,
            volume_weight=spec.volume_weight,
            batch_means=batches,
            warnings=warnings,
        )

    def estimate_moments(self, stream: SampleStream) -> MomentEstimate:
        """Site-resolved <phi_x> and <phi_x phi_y> with batch-means errors."""
        samples = stream.samples
        products = samples[..., :, None] * samples[..., None, :]
        mean_batches = self.batch_means(samples, stream.config.n_batches)
        second_batches = self.batch_means(products, stream.config.n_batches)
        n_b = mean_batches.shape[0]
        return MomentEstimate(
            mean=mean_batches.mean(axis=0),
            mean_stderr=mean_batches.std(axis=0, ddof=1) / np.sqrt(n_b),
            second=second_batches.mean(axis=0),
            second_stderr=second_batches.std(axis=0, ddof=1) / np.sqrt(n_b),
            n_samples=stream.n_samples,
        )

    def langevin_step_halving(
        self,
        target: Union[Phi4Params, GeneralModel],
        config: ChainConfig,
        workers: Optional[int] = None,
    ) -> StepHalvingReport:
        """
        Site-averaged <phi^2> at dt and dt/2 (same seed) with the Richardson
        value 2 m(dt/2) - m(dt) removing the O(dt) bias.
        """
        def second_moment(cfg: ChainConfig) -> Tuple[float, float]:
            stream = self.run_chain(target, cfg, workers)
            per_sample = (stream.samples**2).mean(axis=-1)
            batches = self.batch_means(per_sample, cfg.n_batches)
            return float(batches.mean()), float(batches.std(ddof=1) / np.sqrt(batches.size))

        langevin = config.model_copy(update={"scheme": "langevin_euler"})
        full, full_err = second_moment(langevin)
        half, half_err = second_moment(langevin.model_copy(update={"step_dt": config.step_dt / 2.0}))
        joint = float(np.hypot(full_err, half_err))
        report = StepHalvingReport(
            step_dt=config.step_dt,
            second_moment=full,
            second_moment_stderr=full_err,
            half_step_second_moment=half,
            half_step_second_moment_stderr=half_err,
            extrapolated=2.0 * half - full,
            extrapolated_stderr=float(np.hypot(2.0 * half_err, full_err)),
            converged=abs(full - half) <= 3.0 * joint,
        )
        logger.info("Step halving", step_dt=config.step_dt, full=full, half=half, converged=report.converged)
        return report


# Global sampling service instance
sampling_service = SamplingService()
