from vesicle.viz._overlay import OVERLAY_COLORS, render_overlay
from vesicle.viz._curves import plot_pr_curve, vesicle_theme


PR_PALETTE = ["#16347B", "#0072C7", "#1DA893", "#EB984A", "#DD3A3A", "#9C78E0"]

__all__ = ["OVERLAY_COLORS", "PR_PALETTE", "plot_pr_curve", "render_overlay", "vesicle_theme"]
