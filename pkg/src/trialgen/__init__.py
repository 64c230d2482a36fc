"""Instruction-controlled generation of clinical-trial eligibility criteria.

Desk-scale pipeline: synthetic corpus with exact relation ground truth, a
small causal transformer with hybrid discrete/neural prompting, an editable
exemplar store with dense retrieval, two-stage training, cluster-and-rank
decoding, and the matching evaluation stack.
"""

__version__ = "0.1.0"
