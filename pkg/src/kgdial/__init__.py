"""kgdial: knowledge-grounded dialogue pipeline for noisy spoken input.

Data augmentation that simulates speech noise, knowledge-seeking turn
detection, two-stage knowledge selection (entity tracking plus point-/
list-wise ranking), response generation harnessing, ensembles, consensus
decoding, and the evaluation metric suite, all desk-scale and seeded.
"""

__version__ = "0.1.0"
