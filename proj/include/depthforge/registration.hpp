#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SVD>

#include "depthforge/camera.hpp"
#include "depthforge/correspondence.hpp"
#include "depthforge/errors.hpp"
#include "depthforge/frame_store.hpp"
#include "depthforge/fusion.hpp"

namespace depthforge {

struct LossWeights {
  double depth = 1.0;
  double photometric = 1.0;
  double correspondence = 1.0;
};

struct LossBreakdown {
  double depth = 0.0;           // meters, mean absolute depth difference
  double photometric = 0.0;     // color units, mean absolute difference over 3 channels
  double correspondence = 0.0;  // meters^2
  double total = 0.0;
  LossWeights weights;

  void update_total() {
    total = weights.depth * depth + weights.photometric * photometric +
            weights.correspondence * correspondence;
  }
};

struct RenderLoss {
  double loss = std::numeric_limits<double>::infinity();  // +inf when there is no overlap
  std::size_t overlap = 0;
};

struct RenderSettings {
  double radius = 1.0;
  int max_splats = 8;
};

// Mean of w * |t - T(s)|^2 over the set.
inline double loss_correspondence(const CorrespondenceSet& m, const PoseSE3& pose) {
  if (m.empty()) throw NoCorrespondenceError("loss_correspondence: empty correspondence set");
  double sum = 0.0;
  for (const auto& c : m) sum += c.weight * (c.target.position - pose * c.source.position).squaredNorm();
  return sum / static_cast<double>(m.size());
}

// Gradient of loss_correspondence with respect to a left twist perturbation
// exp(d) * pose at d = 0; rotation components first.
inline Vector6d loss_correspondence_gradient(const CorrespondenceSet& m, const PoseSE3& pose) {
  if (m.empty()) throw NoCorrespondenceError("loss_correspondence_gradient: empty correspondence set");
  Vector6d g = Vector6d::Zero();
  for (const auto& c : m) {
    const Eigen::Vector3d q = pose * c.source.position;
    const Eigen::Vector3d r = c.target.position - q;
    g.head<3>() += 2.0 * c.weight * r.cross(q);
    g.tail<3>() -= 2.0 * c.weight * r;
  }
  return g / static_cast<double>(m.size());
}

struct RenderLosses {
  RenderLoss depth;
  RenderLoss photometric;
};

// Renders the posed source cloud into the target view once and scores both the
// depth and the color residual over pixels valid in the target and the render.
inline RenderLosses render_losses(const RgbdFrame& target, const PointCloud& source_cloud,
                                  const PoseSE3& pose, const RenderSettings& rs = {}) {
  if (source_cloud.empty()) throw InputShapeError("render loss: empty source cloud");
  const RenderedView view = render_view(transform(source_cloud, pose), target.intr, rs.radius, rs.max_splats);
  double dsum = 0.0;
  double csum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < view.depth.size(); ++i) {
    if (!(target.depth[i] > 0.0) || !(view.depth[i] > 0.0)) continue;
    dsum += std::abs(target.depth[i] - view.depth[i]);
    csum += (target.color[i] - view.color[i]).cwiseAbs().sum() / 3.0;
    ++n;
  }
  if (n == 0) return {};
  return {{dsum / n, n}, {csum / n, n}};
}

inline RenderLoss loss_depth_render(const RgbdFrame& target, const PointCloud& source_cloud,
                                    const PoseSE3& pose, const RenderSettings& rs = {}) {
  return render_losses(target, source_cloud, pose, rs).depth;
}

inline RenderLoss loss_photometric(const RgbdFrame& target, const PointCloud& source_cloud,
                                   const PoseSE3& pose, const RenderSettings& rs = {}) {
  return render_losses(target, source_cloud, pose, rs).photometric;
}

// Sums each loss over the neighbors of the set; excluded neighbors are skipped.
inline LossBreakdown frame_set_loss(const LocalFrameSet& set, const FrameSetPoses& poses,
                                    const std::vector<CorrespondenceSet>& matches,
                                    const LossWeights& weights = {}, const RenderSettings& rs = {}) {
  if (poses.size() != set.size() || matches.size() != set.size()) {
    throw InputShapeError("frame_set_loss: one pose and one correspondence set per neighbor required");
  }
  LossBreakdown out;
  out.weights = weights;
  for (std::size_t j = 0; j < set.size(); ++j) {
    if (poses.excluded[j]) continue;
    const PoseSE3& pose = poses.neighbor_to_target[j];
    const RenderLosses r = render_losses(set.target, set.neighbors[j].cloud(), pose, rs);
    out.depth += r.depth.loss;
    out.photometric += r.photometric.loss;
    out.correspondence += loss_correspondence(matches[j], pose);
  }
  out.update_total();
  return out;
}

// Closed-form minimizer of sum w_i |t_i - (R s_i + t)|^2.
inline PoseSE3 weighted_kabsch(const CorrespondenceSet& m, std::span<const double> weights) {
  if (m.size() < 3) throw DegenerateConfigurationError("weighted_kabsch: need at least 3 pairs");
  double wsum = 0.0;
  Eigen::Vector3d s_bar = Eigen::Vector3d::Zero();
  Eigen::Vector3d t_bar = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < m.size(); ++i) {
    wsum += weights[i];
    s_bar += weights[i] * m[i].source.position;
    t_bar += weights[i] * m[i].target.position;
  }
  if (!(wsum > 0.0)) throw DegenerateConfigurationError("weighted_kabsch: total weight is zero");
  s_bar /= wsum;
  t_bar /= wsum;
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (std::size_t i = 0; i < m.size(); ++i) {
    cov += weights[i] * (m[i].source.position - s_bar) * (m[i].target.position - t_bar).transpose();
  }
  const Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d sv = svd.singularValues();
  if (!(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0]) {
    throw DegenerateConfigurationError("weighted_kabsch: rank-deficient covariance (collinear points)");
  }
  Eigen::Matrix3d v = svd.matrixV();
  const Eigen::Matrix3d u = svd.matrixU();
  if ((v * u.transpose()).determinant() < 0.0) v.col(2) *= -1.0;
  const Eigen::Matrix3d r = v * u.transpose();
  return {r, t_bar - r * s_bar};
}

inline PoseSE3 weighted_kabsch(const CorrespondenceSet& m) {
  std::vector<double> w(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) w[i] = m[i].weight;
  return weighted_kabsch(m, w);
}

// Weighted Kabsch with Huber reweighting of the 3D residuals; the Huber scale is
// the median residual of the previous solve.
inline PoseSE3 kabsch_irls(const CorrespondenceSet& m, int iterations = 5) {
  std::vector<double> w(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) w[i] = m[i].weight;
  PoseSE3 pose = weighted_kabsch(m, w);
  std::vector<double> residual(m.size());
  for (int it = 1; it < iterations; ++it) {
    for (std::size_t i = 0; i < m.size(); ++i) {
      residual[i] = (m[i].target.position - pose * m[i].source.position).norm();
    }
    const double scale = detail::median_of(residual);
    if (!(scale > 0.0)) break;
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double huber = residual[i] <= scale ? 1.0 : scale / residual[i];
      w[i] = m[i].weight * huber;
    }
    pose = weighted_kabsch(m, w);
  }
  return pose;
}

struct RegistrationConfig {
  int outer_iterations = 30;
  int irls_iterations = 5;
  int refine_steps = 1;  // gradient steps per outer iteration
  LossWeights weights;
  std::size_t top_k = 400;
  int match_target_stride = 4;
  int match_source_stride = 4;
  double radius_start = 0.5;
  double radius_end = 0.05;
  double fd_step = 1e-4;
  double initial_step = 1e-2;
  int max_backtracks = 10;
  double convergence_tol = 1e-6;
  int convergence_window = 3;
  bool pairwise_full = false;
  RenderSettings render;
  DescriptorOptions descriptor;
};

struct NeighborDiagnostics {
  int offset = 0;
  bool excluded = false;
  std::size_t correspondences = 0;
  std::size_t overlap = 0;
  Twist twist;
};

struct RegistrationResult {
  FrameSetPoses poses;
  LossBreakdown loss;
  std::vector<LossBreakdown> trace;  // accepted totals, non-increasing
  std::vector<NeighborDiagnostics> neighbors;
  // Mean absolute depth residual of neighbor b rendered into neighbor a (row a, column b);
  // +inf without overlap, 0 on the diagonal.
  std::vector<std::vector<double>> pairwise_depth_consistency;
  int iterations_run = 0;
};

namespace detail {

// One term of the set objective: frame `a` observes frame `b` (0 = target).
struct ObjectiveTerm {
  std::size_t a = 0;
  std::size_t b = 0;
  CorrespondenceSet matches;
};

class SetObjective {
 public:
  SetObjective(const LocalFrameSet& set, const RegistrationConfig& cfg) : set_(set), cfg_(cfg) {
    frames_.push_back(&set.target);
    for (const auto& f : set.neighbors) frames_.push_back(&f);
    for (const RgbdFrame* f : frames_) clouds_.push_back(f->cloud());
  }

  std::size_t frame_count() const noexcept { return frames_.size(); }
  const RgbdFrame& frame(std::size_t i) const { return *frames_[i]; }
  const PointCloud& cloud(std::size_t i) const { return clouds_[i]; }

  // poses[0] is the target (identity); poses[j] maps frame j into the target.
  static PoseSE3 relative(const std::vector<PoseSE3>& poses, std::size_t a, std::size_t b) {
    return a == 0 ? poses[b] : poses[a].inverse() * poses[b];
  }

  LossBreakdown term_loss(const ObjectiveTerm& term, const std::vector<PoseSE3>& poses) const {
    return term_loss(term, relative(poses, term.a, term.b));
  }

  LossBreakdown term_loss(const ObjectiveTerm& term, const PoseSE3& rel) const {
    LossBreakdown out;
    out.weights = cfg_.weights;
    const RenderLosses r = render_losses(*frames_[term.a], clouds_[term.b], rel, cfg_.render);
    out.depth = r.depth.loss;
    out.photometric = r.photometric.loss;
    out.correspondence = term.matches.empty() ? 0.0 : loss_correspondence(term.matches, rel);
    out.update_total();
    return out;
  }

 private:
  const LocalFrameSet& set_;
  const RegistrationConfig& cfg_;
  std::vector<const RgbdFrame*> frames_;
  std::vector<PointCloud> clouds_;
};

inline PoseSE3 perturb(const PoseSE3& pose, const Vector6d& delta) {
  return se3_exp(Twist(delta)) * pose;
}

}  // namespace detail

// Per-set optimization of the neighbor-to-target poses: descriptor matching,
// Huber-IRLS Kabsch initialization, then outer iterations of
// re-match (shrinking 3D radius) -> closed-form update -> finite-difference
// gradient refinement of the summed depth/photometric/correspondence objective.
// Every accepted step is non-increasing in the objective.
inline RegistrationResult register_frame_set(const LocalFrameSet& set, const RegistrationConfig& cfg = {}) {
  const std::size_t k = set.size();
  if (k == 0) throw InputShapeError("register_frame_set: frame set has no neighbors");
  for (const auto& n : set.neighbors) require_same_shape(n.depth, set.target.depth, "register_frame_set");

  detail::SetObjective objective(set, cfg);
  const std::size_t nf = objective.frame_count();
  // Neighbors with (almost) no depth cannot be matched or rendered; they are excluded.
  std::vector<bool> usable(nf);
  for (std::size_t i = 0; i < nf; ++i) usable[i] = objective.cloud(i).size() >= 3;
  if (!usable[0]) throw EmptyFieldError("register_frame_set: target frame has too little valid depth");
  std::vector<DescriptorField> fields;
  fields.reserve(nf);
  for (std::size_t i = 0; i < nf; ++i) {
    fields.push_back(usable[i] ? compute_descriptors(objective.frame(i), cfg.descriptor) : DescriptorField{});
  }

  MatchOptions global;
  global.target_stride = cfg.match_target_stride;
  global.source_stride = cfg.match_source_stride;
  auto initial_match = [&](std::size_t a, std::size_t b) -> CorrespondenceSet {
    if (!usable[a] || !usable[b]) return {};
    try {
      return match(fields[a], fields[b], cfg.top_k, global);
    } catch (const InsufficientSourceError&) {
      return {};
    }
  };

  std::vector<detail::ObjectiveTerm> terms;
  for (std::size_t j = 1; j < nf; ++j) terms.push_back({0, j, initial_match(0, j)});
  if (cfg.pairwise_full) {
    for (std::size_t a = 1; a < nf; ++a) {
      for (std::size_t b = a + 1; b < nf; ++b) terms.push_back({a, b, initial_match(a, b)});
    }
  }

  std::vector<PoseSE3> poses(nf, PoseSE3::identity());
  for (std::size_t j = 1; j < nf; ++j) {
    try {
      poses[j] = kabsch_irls(terms[j - 1].matches, cfg.irls_iterations);
    } catch (const DegenerateConfigurationError&) {
      poses[j] = PoseSE3::identity();
    }
  }

  // Neighbors without overlap at initialization are frozen and later excluded.
  std::vector<bool> active(nf, true);
  std::vector<LossBreakdown> parts(terms.size());
  for (std::size_t t = 0; t < terms.size(); ++t) {
    if (usable[terms[t].a] && usable[terms[t].b]) {
      parts[t] = objective.term_loss(terms[t], poses);
    } else {
      parts[t].total = std::numeric_limits<double>::infinity();
    }
  }
  for (std::size_t j = 1; j < nf; ++j) active[j] = std::isfinite(parts[j - 1].total);

  auto term_enabled = [&](const detail::ObjectiveTerm& term) {
    return active[term.b] && (term.a == 0 || active[term.a]);
  };
  auto involves = [](const detail::ObjectiveTerm& term, std::size_t j) { return term.a == j || term.b == j; };
  auto breakdown = [&]() {
    LossBreakdown out;
    out.weights = cfg.weights;
    for (std::size_t t = 0; t < terms.size(); ++t) {
      if (!term_enabled(terms[t])) continue;
      out.depth += parts[t].depth;
      out.photometric += parts[t].photometric;
      out.correspondence += parts[t].correspondence;
    }
    out.update_total();
    return out;
  };
  // Same poses, new matches: only the correspondence component changes.
  auto with_matches = [&](const LossBreakdown& old, const detail::ObjectiveTerm& term) {
    LossBreakdown out = old;
    out.correspondence = term.matches.empty()
                             ? 0.0
                             : loss_correspondence(term.matches, detail::SetObjective::relative(poses, term.a, term.b));
    out.update_total();
    return out;
  };

  struct QuasiNewton {
    Matrix6d inverse_hessian;
    Vector6d previous_grad = Vector6d::Zero();
    Vector6d previous_step = Vector6d::Zero();
    bool has_previous = false;
    bool scaled = false;
  };
  std::vector<QuasiNewton> quasi(nf, QuasiNewton{Matrix6d::Identity() * cfg.initial_step});

  RegistrationResult result;
  result.trace.push_back(breakdown());

  const int outer = std::max(1, cfg.outer_iterations);
  for (int it = 0; it < outer; ++it) {
    // Re-match around the current alignment and take the closed-form update when it helps.
    const double radius = outer > 1 ? cfg.radius_start * std::pow(cfg.radius_end / cfg.radius_start,
                                                                  static_cast<double>(it) / (outer - 1))
                                    : cfg.radius_end;
    for (std::size_t t = 0; t < terms.size(); ++t) {
      auto& term = terms[t];
      if (!term_enabled(term)) continue;
      MatchOptions local = global;
      local.radius = radius;
      local.source_to_target = detail::SetObjective::relative(poses, term.a, term.b);
      CorrespondenceSet fresh;
      try {
        fresh = match(fields[term.a], fields[term.b], cfg.top_k, local);
      } catch (const InsufficientSourceError&) {
        continue;
      }
      if (fresh.size() < 3) continue;
      detail::ObjectiveTerm candidate{term.a, term.b, std::move(fresh)};

      const LossBreakdown same_pose = with_matches(parts[t], candidate);
      if (term.a != 0) {
        if (same_pose.total <= parts[t].total) {
          term = std::move(candidate);
          parts[t] = same_pose;
        }
        continue;
      }
      // Target term: try the new matches at the current pose and at their Kabsch pose.
      const std::size_t j = term.b;
      double best_delta = 0.0;
      bool take_matches = false;
      if (same_pose.total - parts[t].total <= best_delta) {
        best_delta = same_pose.total - parts[t].total;
        take_matches = true;
      }
      std::optional<PoseSE3> best_pose;
      std::vector<LossBreakdown> moved_parts;
      try {
        std::vector<PoseSE3> moved = poses;
        moved[j] = kabsch_irls(candidate.matches, cfg.irls_iterations);
        std::vector<LossBreakdown> trial = parts;
        double d = 0.0;
        for (std::size_t u = 0; u < terms.size(); ++u) {
          if (!term_enabled(terms[u]) || !involves(terms[u], j)) continue;
          trial[u] = objective.term_loss(u == t ? candidate : terms[u], moved);
          d += trial[u].total - parts[u].total;
        }
        if (std::isfinite(d) && d <= best_delta) {
          best_delta = d;
          best_pose = moved[j];
          moved_parts = std::move(trial);
          take_matches = true;
        }
      } catch (const DegenerateConfigurationError&) {
      }
      if (!take_matches) continue;
      term = std::move(candidate);
      if (best_pose) {
        poses[j] = *best_pose;
        parts = std::move(moved_parts);
        quasi[j].has_previous = false;
      } else {
        parts[t] = same_pose;
      }
    }

    // Block quasi-Newton descent: each neighbor's twist in turn, central-difference
    // gradients over the terms that involve it, BFGS directions, backtracking.
    for (int step = 0; step < cfg.refine_steps; ++step) {
      bool any = false;
      for (std::size_t j = 1; j < nf; ++j) {
        if (!active[j]) continue;
        auto local_total = [&](const std::vector<PoseSE3>& p, std::vector<LossBreakdown>* values) {
          double sum = 0.0;
          for (std::size_t t = 0; t < terms.size(); ++t) {
            if (!term_enabled(terms[t]) || !involves(terms[t], j)) continue;
            const LossBreakdown v = objective.term_loss(terms[t], p);
            if (values) (*values)[t] = v;
            sum += v.total;
          }
          return sum;
        };
        double base = 0.0;
        for (std::size_t t = 0; t < terms.size(); ++t) {
          if (term_enabled(terms[t]) && involves(terms[t], j)) base += parts[t].total;
        }
        Vector6d grad = Vector6d::Zero();
        for (int d = 0; d < 6; ++d) {
          Vector6d e = Vector6d::Zero();
          e[d] = cfg.fd_step;
          std::vector<PoseSE3> plus = poses;
          std::vector<PoseSE3> minus = poses;
          plus[j] = detail::perturb(poses[j], e);
          minus[j] = detail::perturb(poses[j], -e);
          const double diff = local_total(plus, nullptr) - local_total(minus, nullptr);
          grad[d] = std::isfinite(diff) ? diff / (2.0 * cfg.fd_step) : 0.0;
        }
        if (!(grad.squaredNorm() > 0.0)) continue;
        auto& q = quasi[j];
        if (q.has_previous) {
          // BFGS update of the inverse Hessian from the last accepted step.
          const Vector6d y = grad - q.previous_grad;
          const double sy = q.previous_step.dot(y);
          if (sy > 1e-12 * q.previous_step.norm() * y.norm()) {
            if (!q.scaled) {
              q.inverse_hessian = Matrix6d::Identity() * (sy / y.squaredNorm());
              q.scaled = true;
            }
            const double rho = 1.0 / sy;
            const Matrix6d a = Matrix6d::Identity() - rho * q.previous_step * y.transpose();
            q.inverse_hessian = a * q.inverse_hessian * a.transpose() + rho * q.previous_step * q.previous_step.transpose();
          }
        }
        Vector6d direction = -(q.inverse_hessian * grad);
        if (!(direction.dot(grad) < 0.0)) {
          q.inverse_hessian = Matrix6d::Identity() * cfg.initial_step;
          q.scaled = false;
          direction = -cfg.initial_step * grad;
        }
        q.has_previous = false;
        bool moved_j = false;
        double alpha = 1.0;
        for (int bt = 0; bt <= cfg.max_backtracks; ++bt, alpha *= 0.5) {
          const Vector6d delta = alpha * direction;
          std::vector<PoseSE3> trial = poses;
          trial[j] = detail::perturb(poses[j], delta);
          std::vector<LossBreakdown> values = parts;
          const double total = local_total(trial, &values);
          if (std::isfinite(total) && total < base) {
            poses = std::move(trial);
            parts = std::move(values);
            q.previous_grad = grad;
            q.previous_step = delta;
            q.has_previous = true;
            moved_j = true;
            any = true;
            break;
          }
        }
        if (!moved_j) {
          q.inverse_hessian = Matrix6d::Identity() * cfg.initial_step;
          q.scaled = false;
        }
      }
      if (!any) break;
    }

    result.trace.push_back(breakdown());
    result.iterations_run = it + 1;
    const std::size_t n = result.trace.size();
    const auto w = static_cast<std::size_t>(std::max(1, cfg.convergence_window));
    if (n > w) {
      const double before = result.trace[n - 1 - w].total;
      const double now = result.trace[n - 1].total;
      if (before - now <= cfg.convergence_tol * std::abs(before)) break;
    }
  }

  result.poses = FrameSetPoses(k);
  result.neighbors.resize(k);
  for (std::size_t j = 1; j < nf; ++j) {
    auto& diag = result.neighbors[j - 1];
    diag.offset = set.offsets.size() == k ? set.offsets[j - 1] : 0;
    diag.correspondences = terms[j - 1].matches.size();
    const RenderLoss depth =
        usable[j] ? loss_depth_render(set.target, objective.cloud(j), poses[j], cfg.render) : RenderLoss{};
    diag.overlap = depth.overlap;
    diag.excluded = !active[j] || !std::isfinite(depth.loss);
    result.poses.neighbor_to_target[j - 1] = poses[j];
    result.poses.excluded[j - 1] = diag.excluded;
    try {
      diag.twist = se3_log(poses[j]);
    } catch (const NonUniqueLogError&) {
      diag.twist = Twist();
    }
  }
  result.pairwise_depth_consistency.assign(k, std::vector<double>(k, 0.0));
  for (std::size_t a = 1; a < nf; ++a) {
    for (std::size_t b = 1; b < nf; ++b) {
      if (a == b) continue;
      if (!usable[a] || !usable[b]) {
        result.pairwise_depth_consistency[a - 1][b - 1] = std::numeric_limits<double>::infinity();
        continue;
      }
      result.pairwise_depth_consistency[a - 1][b - 1] =
          loss_depth_render(objective.frame(a), objective.cloud(b),
                            detail::SetObjective::relative(poses, a, b), cfg.render).loss;
    }
  }
  result.loss = result.trace.back();
  return result;
}

}  // namespace depthforge
