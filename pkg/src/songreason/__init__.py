"""Music-understanding post-training toolkit.

Signal-processing metadata extraction, caption/QA/CoT dataset construction,
rule-based rewards and a small GRPO trainer over rotary-time toy policies.
"""

__version__ = "0.1.0"
