#include "spreg/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>

namespace spreg {

namespace {

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

}  // namespace

ad::ParameterStore init_model_params(const ModelConfig& cfg) {
  cfg.validate();
  ad::ParameterStore params;
  Xoshiro256 rng(mix_seed(cfg.seed, 0x70617261));  // parameter stream
  register_backbone_params(params, cfg, rng);
  register_sem_params(params, cfg, rng);
  register_encoder_params(params, cfg, rng);
  return params;
}

PatchOverlaps compute_patch_overlaps(const FeaturePyramid& pyr_p,
                                     const FeaturePyramid& pyr_q,
                                     const RigidTransform& gt,
                                     const ModelConfig& cfg) {
  const Index np = pyr_p.superpoints().size();
  const Index nq = pyr_q.superpoints().size();
  PatchOverlaps out;
  out.p_to_q = Matrix::Zero(np, nq);
  out.q_to_p = Matrix::Zero(nq, np);

  const SpatialIndex index_q(pyr_q.dense_points());
  const SpatialIndex index_p(pyr_p.dense_points());
  const RigidTransform inv = gt.inverse();

  auto accumulate = [&](const FeaturePyramid& pyr_a, const FeaturePyramid& pyr_b,
                        const SpatialIndex& index_b, const RigidTransform& t,
                        Matrix& counts) {
    const PointCloud& dense_a = pyr_a.dense_points();
    for (Index i = 0; i < dense_a.size(); ++i) {
      const int patch_a = pyr_a.patch_of_dense[static_cast<size_t>(i)];
      if (patch_a < 0) continue;
      const Vec3 moved = t * Vec3(dense_a.points.row(i));
      std::set<int> hit_patches;
      for (const auto& [j, d] : index_b.radius_search(moved, cfg.tau_a)) {
        const int pb = pyr_b.patch_of_dense[static_cast<size_t>(j)];
        if (pb >= 0) hit_patches.insert(pb);
      }
      for (int pb : hit_patches) counts(patch_a, pb) += 1.0;
    }
  };

  accumulate(pyr_p, pyr_q, index_q, gt, out.p_to_q);
  accumulate(pyr_q, pyr_p, index_p, inv, out.q_to_p);

  for (Index i = 0; i < np; ++i) {
    const double sz = static_cast<double>(pyr_p.patches[static_cast<size_t>(i)].size());
    if (sz > 0) out.p_to_q.row(i) /= sz;
  }
  for (Index j = 0; j < nq; ++j) {
    const double sz = static_cast<double>(pyr_q.patches[static_cast<size_t>(j)].size());
    if (sz > 0) out.q_to_p.row(j) /= sz;
  }
  return out;
}

ad::Tensor overlap_circle_loss(const ad::Tensor& feats_p,
                               const ad::Tensor& feats_q,
                               const PatchOverlaps& overlaps,
                               const ModelConfig& cfg) {
  const Index np = feats_p.rows(), nq = feats_q.rows();
  const auto dist = ad::pairwise_distances(ad::l2_normalize_rows(feats_p),
                                           ad::l2_normalize_rows(feats_q));

  ad::Tensor total = ad::Tensor::scalar(0.0);
  int anchors = 0;

  // One direction: anchor rows of `ov` (std::nullopt-free: transposed flag
  // swaps the gather index order so both directions read the same matrix).
  auto run_side = [&](const Matrix& ov, bool anchors_are_p) {
    const Index n_anchor = anchors_are_p ? np : nq;
    const Index n_other = anchors_are_p ? nq : np;
    for (Index a = 0; a < n_anchor; ++a) {
      std::vector<std::pair<int, int>> pos_cells, neg_cells;
      std::vector<double> lambdas;
      for (Index o = 0; o < n_other; ++o) {
        const double v = ov(a, o);
        const auto cell = anchors_are_p
                              ? std::pair<int, int>{static_cast<int>(a), static_cast<int>(o)}
                              : std::pair<int, int>{static_cast<int>(o), static_cast<int>(a)};
        if (v > cfg.overlap_floor) {
          pos_cells.push_back(cell);
          lambdas.push_back(std::sqrt(v));
        } else if (v == 0.0) {
          neg_cells.push_back(cell);
        }
      }
      if (pos_cells.empty()) continue;
      ++anchors;

      Matrix coef(static_cast<Index>(lambdas.size()), 1);
      for (size_t i = 0; i < lambdas.size(); ++i)
        coef(static_cast<Index>(i), 0) = lambdas[i] * cfg.circle_beta;
      const auto dp = ad::gather_cells(dist, pos_cells);
      auto inner = ad::sum(
          ad::exp(ad::mul_const(ad::add_scalar(dp, -cfg.circle_margin_pos), coef)));
      if (!neg_cells.empty()) {
        const auto dn = ad::gather_cells(dist, neg_cells);
        inner = ad::add(
            inner,
            ad::sum(ad::exp(ad::scale(
                ad::add_scalar(ad::scale(dn, -1.0), cfg.circle_margin_neg),
                cfg.circle_beta))));
      }
      total = ad::add(total, ad::log(ad::add_scalar(inner, 1.0)));
    }
  };

  run_side(overlaps.p_to_q, true);
  run_side(overlaps.q_to_p, false);

  if (anchors == 0) return ad::Tensor::scalar(0.0);
  return ad::scale(total, 1.0 / static_cast<double>(anchors));
}

ad::Tensor point_matching_loss(const FeaturePyramid& pyr_p,
                               const FeaturePyramid& pyr_q,
                               const PatchOverlaps& overlaps,
                               const RigidTransform& gt, const ModelConfig& cfg,
                               Xoshiro256& rng) {
  // Candidate patch pairs with ground-truth overlap.
  std::vector<std::pair<int, int>> candidates;
  for (Index i = 0; i < overlaps.p_to_q.rows(); ++i)
    for (Index j = 0; j < overlaps.p_to_q.cols(); ++j)
      if (overlaps.p_to_q(i, j) > 0.0)
        candidates.emplace_back(static_cast<int>(i), static_cast<int>(j));
  if (candidates.empty()) return ad::Tensor::scalar(0.0);

  // Seeded sample without replacement.
  for (size_t i = candidates.size(); i > 1; --i)
    std::swap(candidates[i - 1], candidates[rng.below(i)]);
  const size_t n_pairs =
      std::min<size_t>(static_cast<size_t>(cfg.loss_patch_pairs), candidates.size());
  candidates.resize(n_pairs);
  std::sort(candidates.begin(), candidates.end());

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.d_dense()));
  ad::Tensor total = ad::Tensor::scalar(0.0);
  int counted_pairs = 0;

  for (const auto& [pi, qj] : candidates) {
    const auto& patch_p = pyr_p.patches[static_cast<size_t>(pi)];
    const auto& patch_q = pyr_q.patches[static_cast<size_t>(qj)];
    const Index a = static_cast<Index>(patch_p.size());
    const Index b = static_cast<Index>(patch_q.size());
    if (a == 0 || b == 0) continue;

    const auto fp = ad::gather_rows(pyr_p.dense_features(), patch_p);
    const auto fq = ad::gather_rows(pyr_q.dense_features(), patch_q);
    const auto scores =
        ad::scale(ad::matmul(fp, ad::transpose(fq)), inv_sqrt_d);

    // Zero-pad one slack row and column via constant selectors.
    Matrix pad_r = Matrix::Zero(a, a + 1);
    pad_r.topLeftCorner(a, a).setIdentity();
    Matrix pad_c = Matrix::Zero(b, b + 1);
    pad_c.topLeftCorner(b, b).setIdentity();
    const auto padded = ad::matmul(
        ad::matmul(ad::transpose(ad::Tensor::constant(pad_r)), scores),
        ad::Tensor::constant(pad_c));

    // Sinkhorn in scaling-vector form; identical to alternating row/column
    // normalization of exp(padded).
    const auto k = ad::exp(padded);
    const auto kt = ad::transpose(k);
    ad::Tensor v = ad::Tensor::constant(Matrix::Ones(b + 1, 1));
    ad::Tensor u;
    for (int it = 0; it < cfg.sinkhorn_iters; ++it) {
      u = ad::recip(ad::matmul(k, v));
      v = ad::recip(ad::matmul(kt, u));
    }
    const auto z = ad::mul_colvec(ad::mul_rowvec(k, ad::transpose(v)), u);

    // Ground-truth assignment cells at radius tau_a.
    std::vector<std::pair<int, int>> cells;
    std::vector<bool> row_matched(static_cast<size_t>(a), false);
    std::vector<bool> col_matched(static_cast<size_t>(b), false);
    for (Index i = 0; i < a; ++i) {
      const Vec3 moved = gt * Vec3(pyr_p.dense_points().points.row(patch_p[static_cast<size_t>(i)]));
      for (Index j = 0; j < b; ++j) {
        const Vec3 q = pyr_q.dense_points().points.row(patch_q[static_cast<size_t>(j)]);
        if ((moved - q).norm() < cfg.tau_a) {
          cells.emplace_back(static_cast<int>(i), static_cast<int>(j));
          row_matched[static_cast<size_t>(i)] = true;
          col_matched[static_cast<size_t>(j)] = true;
        }
      }
    }
    for (Index i = 0; i < a; ++i)
      if (!row_matched[static_cast<size_t>(i)])
        cells.emplace_back(static_cast<int>(i), static_cast<int>(b));
    for (Index j = 0; j < b; ++j)
      if (!col_matched[static_cast<size_t>(j)])
        cells.emplace_back(static_cast<int>(a), static_cast<int>(j));

    const auto picked = ad::gather_cells(z, cells);
    total = ad::add(total, ad::scale(ad::sum(ad::log(picked)),
                                     -1.0 / static_cast<double>(cells.size())));
    ++counted_pairs;
  }

  if (counted_pairs == 0) return ad::Tensor::scalar(0.0);
  return ad::scale(total, 1.0 / static_cast<double>(counted_pairs));
}

RegistrationResult register_clouds(const PointCloud& src, const PointCloud& tgt,
                                   const ad::ParameterStore& params_in,
                                   const ModelConfig& cfg) {
  RegistrationResult res;
  double t0 = now_ms();

  // Inference builds no differentiation graph.
  const ad::ParameterStore params = params_in.detached_copy();

  const FeaturePyramid pyr_p = extract_pyramid(src, params, cfg);
  const FeaturePyramid pyr_q = extract_pyramid(tgt, params, cfg);
  res.timing_ms["backbone"] = now_ms() - t0;
  t0 = now_ms();

  const Skeleton skel_p =
      extract_skeleton(pyr_p.superpoints(), pyr_p.superpoint_features(), params, cfg);
  const Skeleton skel_q =
      extract_skeleton(pyr_q.superpoints(), pyr_q.superpoint_features(), params, cfg);
  res.timing_ms["skeleton"] = now_ms() - t0;
  t0 = now_ms();

  const auto [hyb_p, hyb_q] = encode(pyr_p, skel_p, pyr_q, skel_q, params, cfg);
  res.timing_ms["encoder"] = now_ms() - t0;
  t0 = now_ms();

  res.superpoints_p = pyr_p.superpoints().points;
  res.superpoints_q = pyr_q.superpoints().points;
  res.skeleton_p = skel_p.points_value();
  res.skeleton_q = skel_q.points_value();

  res.superpoint_corr =
      coarse_match(l2_normalized_rows(hyb_p.superpoint.value()),
                   l2_normalized_rows(hyb_q.superpoint.value()), cfg.n_coarse,
                   CorrKind::Superpoint);
  res.skeletal_raw =
      coarse_match(l2_normalized_rows(hyb_p.skeletal.value()),
                   l2_normalized_rows(hyb_q.skeletal.value()), cfg.n_coarse,
                   CorrKind::Skeletal);
  res.timing_ms["coarse_match"] = now_ms() - t0;
  t0 = now_ms();

  if (res.skeletal_raw.size() >= 2) {
    const Matrix compat = build_compatibility(res.skeletal_raw, res.skeleton_p,
                                              res.skeleton_q, cfg.sigma_c);
    res.skeletal_denoised =
        spectral_denoise(res.skeletal_raw, compat, cfg.min_cluster, cfg);
  } else {
    res.skeletal_denoised = res.skeletal_raw;
  }
  res.hybrid = hybrid_resample(res.superpoint_corr, res.skeletal_denoised,
                               cfg.n_replace, cfg.n_topk_skeletal);
  res.timing_ms["denoise_resample"] = now_ms() - t0;
  t0 = now_ms();

  res.dense = dense_match(pyr_p, pyr_q, res.hybrid, res.skeleton_p,
                          res.skeleton_q, cfg);
  res.timing_ms["dense_match"] = now_ms() - t0;
  t0 = now_ms();

  const LgrResult lgr = local_to_global(res.dense, cfg);
  res.transform = lgr.transform;
  res.lgr_inliers = lgr.inliers;
  res.lgr_fallback = lgr.fallback;
  res.timing_ms["lgr"] = now_ms() - t0;
  return res;
}

double inlier_ratio(const CorrespondenceSet& corr, const Points& src_coords,
                    const Points& tgt_coords, const RigidTransform& gt,
                    double tau) {
  if (corr.empty()) return 0.0;
  int inliers = 0;
  for (const auto& c : corr) {
    const Vec3 p = src_coords.row(c.src);
    const Vec3 q = tgt_coords.row(c.tgt);
    if ((gt * p - q).norm() < tau) ++inliers;
  }
  return static_cast<double>(inliers) / static_cast<double>(corr.size());
}

std::pair<Vec3, Vec3> resolve_correspondence(const RegistrationResult& result,
                                             const Correspondence& c) {
  switch (c.kind) {
    case CorrKind::Superpoint:
      return {result.superpoints_p.row(c.src), result.superpoints_q.row(c.tgt)};
    case CorrKind::Skeletal:
      return {result.skeleton_p.row(c.src), result.skeleton_q.row(c.tgt)};
    case CorrKind::Dense:
      break;
  }
  // Dense entries carry their own resolved coordinates.
  for (size_t i = 0; i < result.dense.corr.size(); ++i) {
    const auto& d = result.dense.corr[i];
    if (d.src == c.src && d.tgt == c.tgt && d.kind == c.kind)
      return {result.dense.src.row(static_cast<Index>(i)),
              result.dense.tgt.row(static_cast<Index>(i))};
  }
  throw ContractError("resolve_correspondence: dense entry not found");
}

namespace {

/// Inlier ratio of the hybrid coarse set produced from already-encoded
/// features; shares code with register_clouds but skips dense matching.
double hybrid_coarse_ir(const HybridFeatures& hyb_p, const HybridFeatures& hyb_q,
                        const FeaturePyramid& pyr_p, const FeaturePyramid& pyr_q,
                        const Skeleton& skel_p, const Skeleton& skel_q,
                        const RigidTransform& gt, const ModelConfig& cfg) {
  const Points skp = skel_p.points_value();
  const Points skq = skel_q.points_value();
  const auto sp = coarse_match(l2_normalized_rows(hyb_p.superpoint.value()),
                               l2_normalized_rows(hyb_q.superpoint.value()),
                               cfg.n_coarse, CorrKind::Superpoint);
  auto sk = coarse_match(l2_normalized_rows(hyb_p.skeletal.value()),
                         l2_normalized_rows(hyb_q.skeletal.value()), cfg.n_coarse,
                         CorrKind::Skeletal);
  if (sk.size() >= 2) {
    const Matrix compat = build_compatibility(sk, skp, skq, cfg.sigma_c);
    sk = spectral_denoise(sk, compat, cfg.min_cluster, cfg);
  }
  const auto hybrid = hybrid_resample(sp, sk, cfg.n_replace, cfg.n_topk_skeletal);
  if (hybrid.empty()) return 0.0;
  int inl = 0;
  for (const auto& c : hybrid) {
    const Vec3 p = c.kind == CorrKind::Skeletal
                       ? Vec3(skp.row(c.src))
                       : Vec3(pyr_p.superpoints().points.row(c.src));
    const Vec3 q = c.kind == CorrKind::Skeletal
                       ? Vec3(skq.row(c.tgt))
                       : Vec3(pyr_q.superpoints().points.row(c.tgt));
    if ((gt * p - q).norm() < cfg.tau_a) ++inl;
  }
  return static_cast<double>(inl) / static_cast<double>(hybrid.size());
}

}  // namespace

EpochMetrics train_epoch(const std::vector<TrainSample>& dataset,
                         ad::ParameterStore& params, ad::AdamState& adam,
                         const ModelConfig& cfg, Xoshiro256& rng) {
  if (dataset.empty()) throw ContractError("train_epoch: empty dataset");

  EpochMetrics metrics;
  for (size_t s = 0; s < dataset.size(); ++s) {
    const TrainSample& sample = dataset[s];
    try {
      const FeaturePyramid pyr_p = extract_pyramid(sample.source, params, cfg);
      const FeaturePyramid pyr_q = extract_pyramid(sample.target, params, cfg);
      const Skeleton skel_p = extract_skeleton(
          pyr_p.superpoints(), pyr_p.superpoint_features(), params, cfg);
      const Skeleton skel_q = extract_skeleton(
          pyr_q.superpoints(), pyr_q.superpoint_features(), params, cfg);
      const auto [hyb_p, hyb_q] = encode(pyr_p, skel_p, pyr_q, skel_q, params, cfg);

      const PatchOverlaps overlaps =
          compute_patch_overlaps(pyr_p, pyr_q, sample.gt, cfg);
      const auto loss_oc =
          overlap_circle_loss(hyb_p.superpoint, hyb_q.superpoint, overlaps, cfg);
      const auto loss_pm =
          point_matching_loss(pyr_p, pyr_q, overlaps, sample.gt, cfg, rng);
      const auto loss_reg = ad::add(loss_oc, loss_pm);

      const auto loss_skel =
          ad::add(skeleton_loss(pyr_p.superpoints(), skel_p, cfg, rng),
                  skeleton_loss(pyr_q.superpoints(), skel_q, cfg, rng));

      const double reg_v = loss_reg.item();
      const double skel_v = loss_skel.item();
      if (!std::isfinite(reg_v) || !std::isfinite(skel_v)) {
        ++metrics.samples_skipped;
        continue;
      }

      params.allocate_gradients();
      if (cfg.alternate_losses) {
        ad::backward(s % 2 == 0 ? loss_reg : loss_skel);
      } else {
        ad::backward(ad::add(loss_reg, loss_skel));
      }
      ad::adam_step(params, adam);

      metrics.mean_registration_loss += reg_v;
      metrics.mean_skeleton_loss += skel_v;
      metrics.mean_coarse_inlier_ratio += hybrid_coarse_ir(
          hyb_p, hyb_q, pyr_p, pyr_q, skel_p, skel_q, sample.gt, cfg);
      ++metrics.samples_used;
    } catch (const DegenerateInputError&) {
      ++metrics.samples_skipped;
    }
  }

  if (metrics.samples_skipped * 2 > static_cast<int>(dataset.size()))
    throw EpochError("train_epoch: more than half the samples were skipped (" +
                     std::to_string(metrics.samples_skipped) + "/" +
                     std::to_string(dataset.size()) + ")");
  if (metrics.samples_used > 0) {
    metrics.mean_registration_loss /= metrics.samples_used;
    metrics.mean_skeleton_loss /= metrics.samples_used;
    metrics.mean_coarse_inlier_ratio /= metrics.samples_used;
  }
  return metrics;
}

}  // namespace spreg
