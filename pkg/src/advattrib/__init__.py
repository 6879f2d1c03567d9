"""Attribution of adversarial examples: forge attributed data, train a
multi-task model that recovers attack algorithm, victim model and attack
strength from the adversarial image alone."""

__version__ = "0.1.0"
