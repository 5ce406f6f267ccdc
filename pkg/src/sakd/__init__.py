"""Spot-adaptive knowledge distillation on a small reverse-mode autodiff engine."""

from .autodiff import GradMap, Tensor, backward, detach, finite_diff_check
from .distillers import DistillConfig, DistillerKind, assemble_student_loss
from .network import AdaptionSet, BlockSpec, FeatureBundle, Network, NetworkSpec, build_network
from .policy import PolicyParams, RoutingDecision, TauSchedule, straight_through
from .routing import RoutingNetwork, routing_forward, routing_loss
from .trainer import EpochStats, SgdState, Strategy, TeacherMode, Trainer

__version__ = "0.1.0"
