"""duotalk: a desk-scale hybrid sequence model that writes text autoregressively
and fills audio spans by iterative masked denoising, over one shared vocabulary.

The package is organized around the data path:

    corpus     -- unified vocabulary, interleaved text/audio records, synthetic task
    attention  -- per-position region layout and the modality-aware attention mask
    corruption -- absorbing-state masking of audio spans plus the three
                  train-test-gap strategies (batch mixing, prefix preservation,
                  final-span truncation)
    model      -- minimal decoder-only transformer, the AR / masked-denoising /
                  combined losses, gradient checking, checkpoints
    trainer    -- schedule, optimizer loop, metrics, resume
    decoder    -- block-wise parallel denoising and hybrid two-mode generation
    verify     -- exact order-marginal likelihood, bound checks, estimator
                  equivalence, task evaluation
    figures    -- matplotlib report rendering
    cli        -- command line front end
"""

__version__ = "0.1.0"
