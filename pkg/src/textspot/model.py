"""The full spotting model: backbone, proposal head, detection and recognition heads."""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import Config
from .detection import DetectionHead
from .proposals import ProposalHead
from .pyramid import PyramidBackbone
from .recognition import RecognitionHead
from .region import ROI_HEIGHT


class TextSpotter(nn.Module):
    def __init__(self, config: Config | None = None):
        super().__init__()
        self.config = config or Config()
        d = self.config["model.feature_dim"]
        roi_h = ROI_HEIGHT if self.config["roi.mode"] == "varying" else self.config["roi.fixed_h"]
        self.roi_h = roi_h
        self.backbone = PyramidBackbone(d)
        self.tpn = ProposalHead(d)
        self.tdn = DetectionHead(
            feature_dim=d,
            roi_h=roi_h,
            hidden=self.config["model.tdn_hidden"],
            fc_dim=self.config["model.tdn_fc"],
            encoder=self.config["tdn.encoder"],
        )
        self.trn = RecognitionHead(
            feature_dim=d,
            hidden=self.config["model.trn_hidden"],
            attn_dim=self.config["model.attn_dim"],
        )

    def roi_kwargs(self) -> dict:
        return {
            "mode": self.config["roi.mode"],
            "fixed_hw": (self.config["roi.fixed_h"], self.config["roi.fixed_w"]),
            "w_max": self.config["roi.w_max"],
        }

    @property
    def segments(self) -> dict[str, nn.Module]:
        return {"backbone": self.backbone, "tpn": self.tpn, "tdn": self.tdn, "trn": self.trn}


def build_model(config: Config | None = None, dtype: torch.dtype = torch.float32) -> TextSpotter:
    model = TextSpotter(config)
    if dtype != torch.float32:
        model = model.to(dtype)
    return model
