"""Desk-scale laboratory for universal adversarial perturbations against
cross-modality retrieval models.

Modules:
    core        -- shared numeric primitives (RNG, norms, clipping, finite differences)
    synthdata   -- synthetic visible/infrared identity dataset and grayscale transform
    embedder    -- small hand-differentiated embedding network and its training loop
    centroids   -- per-identity per-modality feature centroids and negative selection
    attack      -- universal perturbation learners and per-image baseline attacks
    evaluation  -- CMC / mAP retrieval metrics with an independent brute-force oracle
    theorycheck -- aggregated-vs-stepwise optimization comparison on convex quadratics
    pipeline    -- experiment stages shared by the command line driver
    cli         -- command line entry point
"""

__version__ = "0.1.0"
