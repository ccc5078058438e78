"""Speaker-verification back-end and domain-adaptation toolkit.

Subpackages cover dataset/score I/O (corpus), the augmentation and
filterbank pipeline (features), pooling forwards (pooling), margin losses
with exact gradients (losses), the cosine / as-norm / calibration / fusion
evaluation chain with EER and minDCF (scoring), target-domain statistic
adaptation and spherical k-means pseudo labels (adaptation), the dynamic
loss-gate with label correction (lossgate), a synthetic two-domain benchmark
(synthdata), the desk-scale training harness (training, protocol), and the
config/pipeline/CLI plumbing (config, pipeline, cli).
"""

__version__ = "0.1.0"
