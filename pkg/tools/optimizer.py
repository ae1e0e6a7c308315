"""
Adaptive-moment optimizer
Updates trainable parameters in place and never touches frozen ones
"""

import logging
from typing import Dict, List, Sequence, Tuple

import numpy as np

from exceptions import NumericError
from tools.numerics import Parameter

logger = logging.getLogger(__name__)


class AdamOptimizer:
    """
    Adam over a fixed, named parameter list
    Moment buffers are keyed by parameter name so they can be checkpointed and restored
    """

    def __init__(
        self,
        named_parameters: Sequence[Tuple[str, Parameter]],
        lr: float = 1e-4,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.named_parameters = list(named_parameters)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.first_moment: Dict[str, np.ndarray] = {}
        self.second_moment: Dict[str, np.ndarray] = {}
        logger.info(f"AdamOptimizer initialized over {len(self.trainable())} trainable parameters (lr={lr})")

    def trainable(self) -> List[Tuple[str, Parameter]]:
        return [(name, p) for name, p in self.named_parameters if not p.frozen]

    def zero_grad(self) -> None:
        for _, parameter in self.named_parameters:
            parameter.grad = None

    def step(self) -> None:
        """Apply one update from the accumulated gradients"""
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count

        for name, parameter in self.trainable():
            if parameter.grad is None:
                continue
            grad = parameter.grad
            if not np.all(np.isfinite(grad)):
                raise NumericError(f"Non-finite gradient for parameter '{name}'", step=self.step_count)
            if self.weight_decay:
                grad = grad + self.weight_decay * parameter.data

            m = self.first_moment.get(name)
            v = self.second_moment.get(name)
            if m is None:
                m = np.zeros_like(parameter.data)
                v = np.zeros_like(parameter.data)
            m = self.beta1 * m + (1.0 - self.beta1) * grad
            v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            self.first_moment[name] = m
            self.second_moment[name] = v

            parameter.data -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {"adam.step": np.array(float(self.step_count))}
        for name, m in self.first_moment.items():
            state[f"adam.m.{name}"] = m.copy()
        for name, v in self.second_moment.items():
            state[f"adam.v.{name}"] = v.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.step_count = int(state.get("adam.step", np.array(0.0)))
        self.first_moment = {k[len("adam.m."):]: v.copy() for k, v in state.items() if k.startswith("adam.m.")}
        self.second_moment = {k[len("adam.v."):]: v.copy() for k, v in state.items() if k.startswith("adam.v.")}
