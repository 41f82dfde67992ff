"""Discrete-latent VAE with a Boltzmann machine prior, classical Boltzmann
samplers (Gibbs, simulated annealing, exact enumeration), Ising/max-cut
benchmarks, single-cell evaluation metrics, and a TCP sampler service.

Submodules:
    rng        deterministic counter-based streams and Philox helpers
    energy     Boltzmann machines, Ising problems, enumeration, graphs
    samplers   Gibbs / annealing / exact samplers and benchmark harnesses
    reparam    spike-and-exponential relaxation of binary latents
    model      the VAE itself: ELBO, gradients, training loop, baseline
    scmetrics  clustering agreement, batch mixing, PCA/PCR, classifiers
    dataio     dataset ingestion, preprocessing, synthetic data
    service    length-prefixed TCP sampling service and client
    cli        command-line entry point
"""

__version__ = "0.1.0"
