#include "spreg/matching.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace spreg {

Matrix l2_normalized_rows(const Matrix& x) {
  Matrix out = x;
  for (Index i = 0; i < x.rows(); ++i) {
    const double n = std::sqrt(x.row(i).squaredNorm() + 1e-12);
    out.row(i) /= n;
  }
  return out;
}

namespace {

Matrix softmax_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (Index i = 0; i < m.rows(); ++i) {
    Eigen::RowVectorXd e = (m.row(i).array() - m.row(i).maxCoeff()).exp();
    out.row(i) = e / e.sum();
  }
  return out;
}

}  // namespace

CorrespondenceSet coarse_match(const Matrix& f_src, const Matrix& f_tgt, int cap,
                               CorrKind kind) {
  if (f_src.cols() != f_tgt.cols())
    throw ShapeError("coarse_match: feature widths differ: " +
                     std::to_string(f_src.cols()) + " vs " +
                     std::to_string(f_tgt.cols()));
  if (cap < 1) throw ParameterError("coarse_match: cap must be >= 1");
  const Index n = f_src.rows(), m = f_tgt.rows();
  if (n == 0 || m == 0) return {};

  Matrix d2 = -2.0 * f_src * f_tgt.transpose();
  d2.colwise() += f_src.rowwise().squaredNorm();
  d2.rowwise() += f_tgt.rowwise().squaredNorm().transpose();
  const Matrix s = (-d2.cwiseMax(0.0)).array().exp();

  const Matrix dual = softmax_rows(s).cwiseProduct(softmax_rows(s.transpose()).transpose());

  struct Entry {
    double score;
    int i, j;
  };
  std::vector<Entry> entries;
  entries.reserve(static_cast<size_t>(n * m));
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < m; ++j)
      entries.push_back({dual(i, j), static_cast<int>(i), static_cast<int>(j)});
  const size_t keep = std::min<size_t>(static_cast<size_t>(cap), entries.size());
  std::partial_sort(entries.begin(), entries.begin() + static_cast<long>(keep),
                    entries.end(), [](const Entry& a, const Entry& b) {
                      if (a.score != b.score) return a.score > b.score;
                      if (a.i != b.i) return a.i < b.i;
                      return a.j < b.j;
                    });

  CorrespondenceSet out;
  out.reserve(keep);
  for (size_t e = 0; e < keep; ++e)
    out.push_back({entries[e].i, entries[e].j, entries[e].score, kind, -1});
  return out;
}

Matrix build_compatibility(const CorrespondenceSet& corr, const Points& src_pts,
                           const Points& tgt_pts, double sigma_c) {
  if (sigma_c <= 0) throw ParameterError("build_compatibility: sigma_c must be > 0");
  const Index n = static_cast<Index>(corr.size());
  Matrix m = Matrix::Zero(n, n);
  for (Index a = 0; a < n; ++a) {
    const Vec3 pa = src_pts.row(corr[static_cast<size_t>(a)].src);
    const Vec3 qa = tgt_pts.row(corr[static_cast<size_t>(a)].tgt);
    for (Index b = a + 1; b < n; ++b) {
      const Vec3 pb = src_pts.row(corr[static_cast<size_t>(b)].src);
      const Vec3 qb = tgt_pts.row(corr[static_cast<size_t>(b)].tgt);
      const double delta = std::abs((pa - pb).norm() - (qa - qb).norm());
      const double c = 1.0 - (delta / sigma_c) * (delta / sigma_c);
      const double v = std::max(0.0, c);
      m(a, b) = v;
      m(b, a) = v;
    }
  }
  return m;
}

Vector principal_eigenvector(const Matrix& m) {
  const Index n = m.rows();
  if (n == 0) return Vector();
  Vector v = Vector::Constant(n, 1.0 / std::sqrt(static_cast<double>(n)));
  for (int iter = 0; iter < 100; ++iter) {
    Vector w = m * v;
    const double norm = w.norm();
    if (norm < 1e-300) return Vector::Zero(n);
    w /= norm;
    const double change = (w - v).norm();
    v = w;
    if (change <= 1e-9 * v.norm()) break;
  }
  return v;
}

CorrespondenceSet spectral_denoise(const CorrespondenceSet& corr,
                                   const Matrix& compatibility, int min_cluster,
                                   const ModelConfig& cfg) {
  const Index n = static_cast<Index>(corr.size());
  if (compatibility.rows() != n || compatibility.cols() != n)
    throw ShapeError("spectral_denoise: matrix " +
                     std::to_string(compatibility.rows()) + "x" +
                     std::to_string(compatibility.cols()) + " vs " +
                     std::to_string(n) + " correspondences");
  if (n < 2) return corr;

  const bool one_to_one = cfg.denoise_rule == "one_to_one";
  std::vector<int> retained(static_cast<size_t>(n));
  for (Index i = 0; i < n; ++i) retained[static_cast<size_t>(i)] = static_cast<int>(i);

  while (static_cast<int>(retained.size()) > min_cluster) {
    const Index r = static_cast<Index>(retained.size());
    Matrix sub(r, r);
    for (Index a = 0; a < r; ++a)
      for (Index b = 0; b < r; ++b)
        sub(a, b) = compatibility(retained[static_cast<size_t>(a)],
                                  retained[static_cast<size_t>(b)]);

    const Vector v = principal_eigenvector(sub);
    if (v.size() == 0 || v.cwiseAbs().maxCoeff() < 1e-9) break;

    Index anchor = 0;
    double best = v(0);
    for (Index i = 1; i < r; ++i)
      if (v(i) > best) {
        best = v(i);
        anchor = i;
      }

    struct Conflict {
      double compat;
      Index pos;
    };
    std::vector<Conflict> conflicts;
    for (Index b = 0; b < r; ++b) {
      if (b == anchor) continue;
      bool bad;
      if (one_to_one) {
        const auto& ca = corr[static_cast<size_t>(retained[static_cast<size_t>(anchor)])];
        const auto& cb = corr[static_cast<size_t>(retained[static_cast<size_t>(b)])];
        bad = ca.src == cb.src || ca.tgt == cb.tgt;
      } else {
        bad = sub(anchor, b) < cfg.tau_conflict;
      }
      if (bad) conflicts.push_back({sub(anchor, b), b});
    }
    if (conflicts.empty()) break;

    // Most conflicting first; never drop below the cluster floor.
    std::sort(conflicts.begin(), conflicts.end(), [](const Conflict& a, const Conflict& b) {
      return a.compat != b.compat ? a.compat < b.compat : a.pos < b.pos;
    });
    const int can_remove =
        std::min<int>(static_cast<int>(conflicts.size()),
                      static_cast<int>(retained.size()) - min_cluster);
    std::set<Index> kill;
    for (int c = 0; c < can_remove; ++c) kill.insert(conflicts[static_cast<size_t>(c)].pos);
    std::vector<int> next;
    next.reserve(retained.size() - kill.size());
    for (Index i = 0; i < r; ++i)
      if (!kill.count(i)) next.push_back(retained[static_cast<size_t>(i)]);
    retained = std::move(next);
  }

  CorrespondenceSet out;
  out.reserve(retained.size());
  for (int idx : retained) out.push_back(corr[static_cast<size_t>(idx)]);
  return out;
}

CorrespondenceSet hybrid_resample(const CorrespondenceSet& coarse,
                                  const CorrespondenceSet& skeletal_denoised,
                                  int n_replace, int n_topk) {
  if (n_topk > n_replace)
    throw ParameterError("hybrid_resample: n_topk must be <= n_replace");

  auto by_score_asc = [](const Correspondence& a, const Correspondence& b) {
    if (a.score != b.score) return a.score < b.score;
    if (a.src != b.src) return a.src < b.src;
    return a.tgt < b.tgt;
  };

  CorrespondenceSet kept = coarse;
  std::sort(kept.begin(), kept.end(), by_score_asc);
  const size_t drop = std::min<size_t>(static_cast<size_t>(n_replace), kept.size());
  kept.erase(kept.begin(), kept.begin() + static_cast<long>(drop));
  std::reverse(kept.begin(), kept.end());  // strongest first

  CorrespondenceSet skel = skeletal_denoised;
  std::sort(skel.begin(), skel.end(), by_score_asc);
  std::reverse(skel.begin(), skel.end());
  const size_t take = std::min<size_t>(static_cast<size_t>(n_topk), skel.size());
  for (size_t i = 0; i < take; ++i) {
    Correspondence c = skel[i];
    c.kind = CorrKind::Skeletal;
    kept.push_back(c);
  }
  return kept;
}

Matrix sinkhorn_normalize(const Matrix& scores, int iterations) {
  Matrix z = scores.array().exp();
  for (int it = 0; it < iterations; ++it) {
    for (Index i = 0; i < z.rows(); ++i) {
      const double s = z.row(i).sum();
      if (s > 0) z.row(i) /= s;
    }
    for (Index j = 0; j < z.cols(); ++j) {
      const double s = z.col(j).sum();
      if (s > 0) z.col(j) /= s;
    }
  }
  return z;
}

namespace {

struct PatchPairMatches {
  std::vector<std::pair<int, int>> local;  // dense indices
  std::vector<double> scores;
};

/// Sinkhorn + mutual top-k on one patch pair's dense features.
PatchPairMatches match_patch_pair(const Matrix& fp, const Matrix& fq,
                                  const ModelConfig& cfg) {
  PatchPairMatches out;
  const Index a = fp.rows(), b = fq.rows();
  if (a == 0 || b == 0) return out;

  Matrix scores = Matrix::Zero(a + 1, b + 1);
  scores.topLeftCorner(a, b) =
      fp * fq.transpose() / std::sqrt(static_cast<double>(fp.cols()));
  const Matrix z = sinkhorn_normalize(scores, cfg.sinkhorn_iters);

  const int k = cfg.mutual_topk;
  auto topk_of_row = [&](Index i) {
    std::vector<Index> idx(static_cast<size_t>(b));
    for (Index j = 0; j < b; ++j) idx[static_cast<size_t>(j)] = j;
    std::partial_sort(idx.begin(), idx.begin() + std::min<Index>(k, b), idx.end(),
                      [&](Index x, Index y) {
                        return z(i, x) != z(i, y) ? z(i, x) > z(i, y) : x < y;
                      });
    idx.resize(static_cast<size_t>(std::min<Index>(k, b)));
    return idx;
  };
  auto topk_of_col = [&](Index j) {
    std::vector<Index> idx(static_cast<size_t>(a));
    for (Index i = 0; i < a; ++i) idx[static_cast<size_t>(i)] = i;
    std::partial_sort(idx.begin(), idx.begin() + std::min<Index>(k, a), idx.end(),
                      [&](Index x, Index y) {
                        return z(x, j) != z(y, j) ? z(x, j) > z(y, j) : x < y;
                      });
    idx.resize(static_cast<size_t>(std::min<Index>(k, a)));
    return idx;
  };

  std::vector<std::vector<Index>> row_top(static_cast<size_t>(a)),
      col_top(static_cast<size_t>(b));
  for (Index i = 0; i < a; ++i) row_top[static_cast<size_t>(i)] = topk_of_row(i);
  for (Index j = 0; j < b; ++j) col_top[static_cast<size_t>(j)] = topk_of_col(j);

  for (Index i = 0; i < a; ++i) {
    for (Index j : row_top[static_cast<size_t>(i)]) {
      if (z(i, j) <= cfg.tau_m) continue;
      const auto& ct = col_top[static_cast<size_t>(j)];
      if (std::find(ct.begin(), ct.end(), i) == ct.end()) continue;
      out.local.emplace_back(static_cast<int>(i), static_cast<int>(j));
      out.scores.push_back(z(i, j));
    }
  }
  return out;
}

}  // namespace

DenseMatches dense_match(const FeaturePyramid& pyr_p, const FeaturePyramid& pyr_q,
                         const CorrespondenceSet& coarse,
                         const Points& skel_pts_p, const Points& skel_pts_q,
                         const ModelConfig& cfg) {
  if (coarse.empty()) throw ContractError("dense_match: coarse set is empty");

  const Matrix& fp_all = pyr_p.dense_features().value();
  const Matrix& fq_all = pyr_q.dense_features().value();

  struct Picked {
    double score;
    int group;
  };
  // Dense pairs keyed by (src, tgt) dense index; skeletal singletons keyed
  // separately with kind in the key.
  std::map<std::pair<int, int>, Picked> dense_best;
  std::map<std::pair<int, int>, Picked> skel_best;

  for (size_t c = 0; c < coarse.size(); ++c) {
    const Correspondence& cc = coarse[c];
    if (cc.kind == CorrKind::Skeletal) {
      const std::pair<int, int> key{cc.src, cc.tgt};
      auto it = skel_best.find(key);
      if (it == skel_best.end() || cc.score > it->second.score)
        skel_best[key] = {cc.score, static_cast<int>(c)};
      continue;
    }
    const auto& patch_p = pyr_p.patches[static_cast<size_t>(cc.src)];
    const auto& patch_q = pyr_q.patches[static_cast<size_t>(cc.tgt)];
    if (patch_p.empty() || patch_q.empty()) continue;

    Matrix fp(static_cast<Index>(patch_p.size()), fp_all.cols());
    Matrix fq(static_cast<Index>(patch_q.size()), fq_all.cols());
    for (size_t i = 0; i < patch_p.size(); ++i) fp.row(static_cast<Index>(i)) = fp_all.row(patch_p[i]);
    for (size_t j = 0; j < patch_q.size(); ++j) fq.row(static_cast<Index>(j)) = fq_all.row(patch_q[j]);

    const auto matches = match_patch_pair(fp, fq, cfg);
    for (size_t r = 0; r < matches.local.size(); ++r) {
      const std::pair<int, int> key{patch_p[static_cast<size_t>(matches.local[r].first)],
                                    patch_q[static_cast<size_t>(matches.local[r].second)]};
      const double sc = matches.scores[r];
      auto it = dense_best.find(key);
      if (it == dense_best.end() || sc > it->second.score)
        dense_best[key] = {sc, static_cast<int>(c)};
    }
  }

  DenseMatches out;
  const size_t total = dense_best.size() + skel_best.size();
  out.corr.reserve(total);
  out.src.resize(static_cast<Index>(total), 3);
  out.tgt.resize(static_cast<Index>(total), 3);
  Index row = 0;
  for (const auto& [key, val] : dense_best) {
    out.corr.push_back({key.first, key.second, val.score, CorrKind::Dense, val.group});
    out.src.row(row) = pyr_p.dense_points().points.row(key.first);
    out.tgt.row(row) = pyr_q.dense_points().points.row(key.second);
    ++row;
  }
  for (const auto& [key, val] : skel_best) {
    out.corr.push_back({key.first, key.second, val.score, CorrKind::Skeletal, val.group});
    out.src.row(row) = skel_pts_p.row(key.first);
    out.tgt.row(row) = skel_pts_q.row(key.second);
    ++row;
  }
  return out;
}

namespace {

int count_inliers(const DenseMatches& m, const RigidTransform& t, double tau,
                  std::vector<int>* inlier_rows = nullptr) {
  int count = 0;
  for (Index i = 0; i < m.src.rows(); ++i) {
    const Vec3 moved = t * Vec3(m.src.row(i));
    if ((moved - Vec3(m.tgt.row(i))).norm() < tau) {
      ++count;
      if (inlier_rows) inlier_rows->push_back(static_cast<int>(i));
    }
  }
  return count;
}

RigidTransform solve_rows(const DenseMatches& m, const std::vector<int>& rows) {
  Points src(static_cast<Index>(rows.size()), 3);
  Points tgt(static_cast<Index>(rows.size()), 3);
  Vector w(static_cast<Index>(rows.size()));
  for (size_t r = 0; r < rows.size(); ++r) {
    src.row(static_cast<Index>(r)) = m.src.row(rows[r]);
    tgt.row(static_cast<Index>(r)) = m.tgt.row(rows[r]);
    w(static_cast<Index>(r)) = m.corr[static_cast<size_t>(rows[r])].score;
  }
  return weighted_procrustes(src, tgt, w);
}

}  // namespace

LgrResult local_to_global(const DenseMatches& dense, const ModelConfig& cfg) {
  if (dense.corr.empty()) throw ContractError("local_to_global: no dense matches");

  // Group rows by owning coarse pair.
  std::map<int, std::vector<int>> groups;
  for (size_t i = 0; i < dense.corr.size(); ++i)
    groups[dense.corr[i].group].push_back(static_cast<int>(i));

  LgrResult result;
  bool have_candidate = false;
  int best_inliers = -1;
  RigidTransform best_t;

  for (const auto& [gid, rows] : groups) {
    if (rows.size() < 3) continue;
    RigidTransform t;
    try {
      t = solve_rows(dense, rows);
    } catch (const DegenerateGeometryError&) {
      continue;
    }
    const int inl = count_inliers(dense, t, cfg.tau_a);
    if (inl > best_inliers) {
      best_inliers = inl;
      best_t = t;
      have_candidate = true;
    }
  }

  if (!have_candidate) {
    // Global fallback over everything.
    std::vector<int> all(dense.corr.size());
    for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    if (all.size() < 3)
      throw DegenerateGeometryError(
          "local_to_global: fewer than 3 dense correspondences");
    best_t = solve_rows(dense, all);
    best_inliers = count_inliers(dense, best_t, cfg.tau_a);
    result.fallback = true;
  }

  // Iterative re-solve on inliers; an update that loses inliers is rejected.
  for (int it = 0; it < cfg.lgr_refine; ++it) {
    std::vector<int> inlier_rows;
    count_inliers(dense, best_t, cfg.tau_a, &inlier_rows);
    if (inlier_rows.size() < 3) break;
    RigidTransform t;
    try {
      t = solve_rows(dense, inlier_rows);
    } catch (const DegenerateGeometryError&) {
      break;
    }
    const int inl = count_inliers(dense, t, cfg.tau_a);
    if (inl < best_inliers) break;
    best_inliers = inl;
    best_t = t;
  }

  result.transform = best_t;
  result.inliers = best_inliers;
  return result;
}

}  // namespace spreg
