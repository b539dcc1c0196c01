"""
Visualization utilities for SpinFlow
Plotly figures for the spin scatter, rally trajectories, toy-training loss and
benchmark latencies, plus a dependency-free SVG writer for the spin scatter
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np
import pandas as pd
import plotly.express as px
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from utils.datatypes import SpinLabel, TableGeometry, Trajectory3D
from utils.spin import SpinCentroids

logger = logging.getLogger(__name__)


class VisualizationHelper:
    def __init__(self):
        self.colors = {
            'primary': '#667eea',
            'secondary': '#764ba2',
            'success': '#28a745',
            'warning': '#ffc107',
            'danger': '#dc3545',
            'info': '#17a2b8',
            'light': '#f8f9fa',
            'dark': '#343a40'
        }

        # one colour per cluster, grey for rejected hits
        self.label_colors = {
            SpinLabel.NO_SPIN.value: '#17a2b8',
            SpinLabel.LIGHT_TOPSPIN.value: '#ffc107',
            SpinLabel.HEAVY_TOPSPIN.value: '#dc3545',
            SpinLabel.NO_CLUSTER.value: '#6c757d',
        }
        self.event_colors = {'bounce': self.colors['success'], 'hit': self.colors['secondary']}

    def create_spin_scatter(self, scatter: pd.DataFrame, centroids: Optional[SpinCentroids] = None,
                            facet_by_level: bool = False) -> go.Figure:
        """Downward acceleration against change in horizontal speed, one marker per measured hit"""
        centroids = centroids or SpinCentroids()
        measured = scatter.dropna(subset=['delta_v_xy', 'z_accel'])
        facet = 'player_level' if facet_by_level and measured['player_level'].notna().any() else None
        if facet:
            measured = measured.assign(player_level=measured['player_level'].fillna('unknown'))

        fig = px.scatter(
            measured, x='delta_v_xy', y='z_accel', color='label', facet_col=facet,
            color_discrete_map=self.label_colors,
            category_orders={'label': [label.value for label in SpinLabel]},
            hover_data=['rally_id', 'frame_index', 'centroid_distance'],
        )
        n_facets = max(1, measured[facet].nunique()) if facet else 1
        for label, (dv, za) in centroids.as_dict().items():
            for col in range(1, n_facets + 1):
                fig.add_trace(go.Scatter(
                    x=[dv], y=[za], mode='markers+text', text=[label.cluster_name],
                    textposition='top center', showlegend=False,
                    marker=dict(symbol='x', size=14, color=self.colors['dark'],
                                line=dict(width=2, color=self.label_colors[label.value])),
                    hovertemplate=f'<b>{label.value} centroid</b><br>'
                                  'dv: %{x:.3f} m/s<br>2a: %{y:.2f} m/s²<extra></extra>'
                ), **({"row": 1, "col": col} if facet else {}))

        fig.update_layout(
            title='Spin clusters: downward acceleration vs change in velocity',
            height=500,
            legend_title_text='Cluster',
            font={'color': self.colors['dark'], 'family': "Arial"}
        )
        fig.update_xaxes(title_text='Change in horizontal speed at bounce (m/s)')
        fig.update_yaxes(title_text='Downward acceleration (m/s²)', col=1)
        return fig

    def create_trajectory_figure(self, trajectory: Trajectory3D, truth: Optional[Trajectory3D] = None,
                                 table: Optional[TableGeometry] = None) -> go.Figure:
        """Side view (y, z) and height over frames, with bounces and hits marked"""
        table = table or TableGeometry()
        fig = make_subplots(rows=2, cols=1, subplot_titles=('Side view', 'Height over time'),
                            vertical_spacing=0.12)

        if truth is not None and len(truth):
            fig.add_trace(go.Scatter(x=truth.positions[:, 1], y=truth.positions[:, 2], mode='lines',
                                     name='Ground truth', line=dict(color=self.colors['light'], width=6)),
                          row=1, col=1)
        fig.add_trace(go.Scatter(x=trajectory.positions[:, 1], y=trajectory.positions[:, 2], mode='lines+markers',
                                 name=f'{trajectory.source.title()} trajectory', marker=dict(size=3),
                                 line=dict(color=self.colors['primary'], width=2)),
                      row=1, col=1)
        fig.add_trace(go.Scatter(x=trajectory.frame_index, y=trajectory.positions[:, 2], mode='lines',
                                 name='Height', showlegend=False, line=dict(color=self.colors['primary'])),
                      row=2, col=1)

        # table top
        fig.add_shape(type='line', x0=table.y_bounds[0], x1=table.y_bounds[1],
                      y0=table.surface_height, y1=table.surface_height,
                      line=dict(color=self.colors['dark'], width=3), row=1, col=1)

        for event in trajectory.events:
            fig.add_trace(go.Scatter(
                x=[event.position[1]], y=[event.position[2]], mode='markers', showlegend=False,
                marker=dict(size=10, color=self.event_colors[event.kind],
                            symbol='circle' if event.kind == 'bounce' else 'diamond'),
                hovertemplate=f'{event.kind} at frame {event.frame_index}<extra></extra>'
            ), row=1, col=1)
            fig.add_vline(x=event.frame_index, line_dash="dash", line_color=self.event_colors[event.kind],
                          annotation_text=event.kind.title(), annotation_position="top", row=2, col=1)

        fig.update_layout(
            title=f'Rally {trajectory.rally_id}',
            height=700,
            showlegend=True
        )
        fig.update_xaxes(title_text='y (m)', row=1, col=1)
        fig.update_yaxes(title_text='z (m)', row=1, col=1)
        fig.update_xaxes(title_text='Frame', row=2, col=1)
        fig.update_yaxes(title_text='z (m)', row=2, col=1)
        return fig

    def create_loss_curve(self, histories: Dict[str, pd.DataFrame]) -> go.Figure:
        """Raw and smoothed training loss per recurrent cell"""
        palette = [self.colors['primary'], self.colors['danger'], self.colors['success'], self.colors['info']]
        fig = go.Figure()
        for color, (cell, history) in zip(palette, histories.items()):
            fig.add_trace(go.Scatter(x=history['step'], y=history['loss'], mode='lines', name=f'{cell} loss',
                                     line=dict(color=color, width=1), opacity=0.35))
            fig.add_trace(go.Scatter(x=history['step'], y=history['smoothed_loss'], mode='lines',
                                     name=f'{cell} smoothed', line=dict(color=color, width=3)))
        fig.update_layout(
            title='Toy tracker training loss',
            xaxis_title='Step',
            yaxis_title='Heatmap cross-entropy',
            height=400
        )
        return fig

    def create_latency_chart(self, stages: pd.DataFrame, budget_ms: float) -> go.Figure:
        """Per-stage p50 and p99 latency per stereo frame against the real-time budget"""
        fig = go.Figure()
        fig.add_trace(go.Bar(x=stages['stage'], y=stages['p50_ms'], name='p50',
                             marker_color=self.colors['primary']))
        fig.add_trace(go.Bar(x=stages['stage'], y=stages['p99_ms'], name='p99',
                             marker_color=self.colors['secondary']))
        fig.add_hline(y=budget_ms, line_dash="dash", line_color=self.colors['danger'],
                      annotation_text=f"Budget {budget_ms} ms", annotation_position="top left")
        fig.update_layout(
            title='Latency per stereo frame',
            xaxis_title='Stage',
            yaxis_title='Latency (ms)',
            barmode='group',
            height=400
        )
        return fig


def write_html(fig: go.Figure, path: str) -> None:
    """Standalone HTML with a fixed div id so repeated runs produce identical files"""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.write_html(path, include_plotlyjs='cdn', full_html=True, div_id='spinflow-figure')
    logger.info(f"Wrote interactive figure to {path}")


def _ticks(low: float, high: float, count: int = 6) -> np.ndarray:
    step = (high - low) / (count - 1)
    magnitude = 10 ** np.floor(np.log10(step))
    step = min((m * magnitude for m in (1, 2, 2.5, 5, 10) if m * magnitude >= step), default=step)
    return np.arange(np.ceil(low / step) * step, high + 1e-9 * step, step)


def spin_scatter_svg(scatter: pd.DataFrame, centroids: Optional[SpinCentroids] = None,
                     width: int = 640, height: int = 480) -> str:
    """The spin scatter as SVG text: cluster-coloured hits and the three centroids as crosses"""
    centroids = centroids or SpinCentroids()
    colors = VisualizationHelper().label_colors
    measured = scatter.dropna(subset=['delta_v_xy', 'z_accel'])
    centres = np.array(list(centroids.as_dict().values()))
    xs = np.concatenate([measured['delta_v_xy'].to_numpy(float), centres[:, 0]])
    ys = np.concatenate([measured['z_accel'].to_numpy(float), centres[:, 1]])
    pad_x = max(0.1, 0.08 * np.ptp(xs))
    pad_y = max(0.5, 0.08 * np.ptp(ys))
    x_lo, x_hi = xs.min() - pad_x, xs.max() + pad_x
    y_lo, y_hi = ys.min() - pad_y, ys.max() + pad_y

    left, right, top, bottom = 70, 150, 40, 55
    plot_w, plot_h = width - left - right, height - top - bottom

    def sx(x: float) -> float:
        return left + (x - x_lo) / (x_hi - x_lo) * plot_w

    def sy(y: float) -> float:
        return top + (y_hi - y) / (y_hi - y_lo) * plot_h

    out: List[str] = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="Arial" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#343a40"/>',
        f'<text x="{left + plot_w / 2:.1f}" y="{top - 15}" text-anchor="middle" font-size="14">'
        'Downward acceleration vs change in velocity</text>',
    ]
    for tx in _ticks(x_lo, x_hi):
        out.append(f'<line x1="{sx(tx):.2f}" y1="{top + plot_h}" x2="{sx(tx):.2f}" y2="{top + plot_h + 5}" '
                   'stroke="#343a40"/>')
        out.append(f'<text x="{sx(tx):.2f}" y="{top + plot_h + 18}" text-anchor="middle">{tx:.2f}</text>')
    for ty in _ticks(y_lo, y_hi):
        out.append(f'<line x1="{left - 5}" y1="{sy(ty):.2f}" x2="{left}" y2="{sy(ty):.2f}" stroke="#343a40"/>')
        out.append(f'<text x="{left - 8}" y="{sy(ty) + 4:.2f}" text-anchor="end">{ty:.1f}</text>')
    out.append(f'<text x="{left + plot_w / 2:.1f}" y="{height - 12}" text-anchor="middle">'
               'Change in horizontal speed at bounce (m/s)</text>')
    out.append(f'<text x="18" y="{top + plot_h / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 18 {top + plot_h / 2:.1f})">Downward acceleration (m/s&#178;)</text>')

    for row in measured.itertuples(index=False):
        out.append(f'<circle cx="{sx(row.delta_v_xy):.2f}" cy="{sy(row.z_accel):.2f}" r="3" '
                   f'fill="{colors.get(row.label, "#6c757d")}" fill-opacity="0.75"/>')
    for label, (dv, za) in centroids.as_dict().items():
        cx, cy = sx(dv), sy(za)
        out.append(f'<path d="M{cx - 7:.2f},{cy - 7:.2f} L{cx + 7:.2f},{cy + 7:.2f} '
                   f'M{cx - 7:.2f},{cy + 7:.2f} L{cx + 7:.2f},{cy - 7:.2f}" stroke="#343a40" stroke-width="2.5"/>')
        out.append(f'<text x="{cx + 9:.2f}" y="{cy - 6:.2f}">{escape(label.cluster_name)}</text>')

    for k, label in enumerate(SpinLabel):
        ly = top + 10 + 18 * k
        out.append(f'<circle cx="{left + plot_w + 20}" cy="{ly}" r="5" fill="{colors[label.value]}"/>')
        count = int((measured['label'] == label.value).sum())
        out.append(f'<text x="{left + plot_w + 30}" y="{ly + 4}">{escape(label.value)} ({count})</text>')
    out.append('</svg>')
    return '\n'.join(out) + '\n'


def write_spin_svg(path: str, scatter: pd.DataFrame, centroids: Optional[SpinCentroids] = None) -> None:
    text = spin_scatter_svg(scatter, centroids)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(text)
    logger.info(f"Wrote spin scatter SVG to {path}")


def scatter_from_records(records: Sequence[Dict]) -> pd.DataFrame:
    """Scatter frame from spin JSONL rows, for plotting a spin file directly"""
    columns = ['rally_id', 'frame_index', 'time', 'delta_v_xy', 'z_accel', 'label', 'centroid_distance',
               'reason', 'player_level']
    frame = pd.DataFrame(list(records), columns=columns)
    return frame.astype({'delta_v_xy': float, 'z_accel': float})
