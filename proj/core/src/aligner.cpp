#include "dmloc/aligner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dmloc/ops.hpp"
#include "dmloc/util.hpp"
#include "json_io.hpp"

namespace dmloc {

// ---- anchor ---------------------------------------------------------------

AnchorImage build_anchor(std::span<const Tensor> normals, std::size_t count, std::uint64_t seed,
                         std::string source_split) {
    if (count == 0) throw ConfigError("build_anchor: count must be at least 1");
    if (normals.size() < count) {
        throw ConfigError("build_anchor: " + std::to_string(count) + " normal samples requested but only " +
                          std::to_string(normals.size()) + " available (short by " +
                          std::to_string(count - normals.size()) + ")");
    }
    std::vector<std::size_t> order(normals.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    const Shape shape = normals[order[0]].shape();
    std::vector<double> acc(normals[order[0]].size(), 0.0);
    for (std::size_t i = 0; i < count; ++i) {
        const auto& t = normals[order[i]];
        if (t.shape() != shape) throw ShapeError("build_anchor: normal images differ in shape");
        for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += t[j];
    }
    AnchorImage a{Tensor(shape), count, std::move(source_split)};
    for (std::size_t j = 0; j < acc.size(); ++j) a.image[j] = static_cast<float>(acc[j] / double(count));
    return a;
}

AnchorImage build_anchor(const Split& split, std::size_t count, std::uint64_t seed) {
    std::vector<Tensor> normals;
    for (const auto& s : split.samples) {
        if (s.is_normal) normals.push_back(s.image);
    }
    return build_anchor(normals, count, seed, split.name);
}

std::string anchor_hash(const AnchorImage& a) {
    Fnv1a h;
    h.update(a.image).update_u64(a.sample_count).update(a.source_split);
    return h.hex();
}

// ---- transform ------------------------------------------------------------

namespace {

void check_pool(const Shape& shape, std::size_t k) {
    if (shape.size() != 3) throw ShapeError("transform_image expects [C,H,W], got " + shape_string(shape));
    if (k == 0 || shape[1] % k != 0 || shape[2] % k != 0) {
        throw ConfigError("pool kernel " + std::to_string(k) + " does not divide " + shape_string(shape));
    }
}

PoseVector<float> pose_of(const AffineParams& p) { return p.as_array(); }

}  // namespace

template <class T>
BasicTensor<T> transform_image(const BasicTensor<T>& input, const PoseVector<T>& params, std::size_t pool_kernel) {
    check_pool(input.shape(), pool_kernel);
    const auto warped = affine_warp(input, affine_matrix_of(params));
    const auto pooled = avg_pool2d(warped, pool_kernel, pool_kernel);
    return bilinear_resample(pooled, input.dim(1), input.dim(2));
}

Tensor transform_image(const Tensor& input, const AffineParams& params, std::size_t pool_kernel) {
    return transform_image<float>(input, pose_of(params), pool_kernel);
}

PoseVector<float> transform_image_backward(const Tensor& input, const PoseVector<float>& params,
                                           std::size_t pool_kernel, const Tensor& grad_out) {
    check_pool(input.shape(), pool_kernel);
    const auto m = affine_matrix_of(params);
    const Shape pooled_shape{input.dim(0), input.dim(1) / pool_kernel, input.dim(2) / pool_kernel};
    const auto g_pooled = bilinear_resample_backward(pooled_shape, grad_out);
    const auto g_warped = avg_pool2d_backward(input.shape(), pool_kernel, pool_kernel, g_pooled);
    const auto gw = affine_warp_backward(input, m, g_warped, false);
    return affine_params_backward_of(params, gw.matrix);
}

// ---- loss -----------------------------------------------------------------

template <class T>
AlignmentObjective<T>::AlignmentObjective(const BasicTensor<T>& anchor, const BasicModelWeights<T>* extractor,
                                          std::vector<std::size_t> layers)
    : anchor_(anchor), extractor_(extractor), layers_(std::move(layers)) {
    if (!layers_.empty()) {
        if (!extractor_) throw ConfigError("alignment loss: perceptual layers requested without an extractor");
        for (auto l : layers_) {
            if (l >= extractor_->arch.blocks()) {
                throw ConfigError("alignment loss: layer id " + std::to_string(l) + " out of range (extractor has " +
                                  std::to_string(extractor_->arch.blocks()) + " blocks)");
            }
        }
        anchor_features_ = backbone_forward(*extractor_, anchor_).outputs;
    }
}

template <class T>
LossParts AlignmentObjective<T>::value(const BasicTensor<T>& transformed) const {
    return evaluate(transformed, nullptr);
}

template <class T>
LossParts AlignmentObjective<T>::value_and_grad(const BasicTensor<T>& transformed, BasicTensor<T>& grad) const {
    return evaluate(transformed, &grad);
}

template <class T>
LossParts AlignmentObjective<T>::evaluate(const BasicTensor<T>& x, BasicTensor<T>* grad) const {
    if (x.shape() != anchor_.shape()) {
        throw ShapeError("alignment loss: image " + shape_string(x.shape()) + " vs anchor " +
                         shape_string(anchor_.shape()));
    }
    LossParts out;
    if (grad) *grad = BasicTensor<T>(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = double(x[i]) - double(anchor_[i]);
        out.euclidean += std::abs(d);
        if (grad) (*grad)[i] = d > 0 ? T{1} : (d < 0 ? T{-1} : T{0});
    }
    if (!layers_.empty()) {
        const auto trace = backbone_forward(*extractor_, x);
        std::vector<BasicTensor<T>> g_blocks(extractor_->arch.blocks());
        for (auto l : layers_) {
            const auto& f = trace.outputs[l];
            const auto& fa = anchor_features_[l];
            double sq = 0.0;
            for (std::size_t i = 0; i < f.size(); ++i) {
                const double d = double(f[i]) - double(fa[i]);
                sq += d * d;
            }
            const double norm = std::sqrt(sq), volume = double(f.size());
            out.perceptual += norm / volume;
            if (grad && norm > 0.0) {
                // A layer listed twice contributes twice, as in the sum.
                if (g_blocks[l].empty()) g_blocks[l] = BasicTensor<T>(f.shape());
                const double scale = 1.0 / (norm * volume);
                for (std::size_t i = 0; i < f.size(); ++i) {
                    g_blocks[l][i] += static_cast<T>((double(f[i]) - double(fa[i])) * scale);
                }
            }
        }
        if (grad) {
            const auto back = backbone_backward(*extractor_, trace, g_blocks, false, true);
            for (std::size_t i = 0; i < grad->size(); ++i) (*grad)[i] += back.input[i];
        }
    }
    out.total = out.perceptual + out.euclidean;
    return out;
}

template <class T>
LossParts alignment_loss(const BasicTensor<T>& anchor, const BasicTensor<T>& transformed,
                         const BasicModelWeights<T>* extractor, const std::vector<std::size_t>& layers) {
    return AlignmentObjective<T>(anchor, extractor, layers).value(transformed);
}

// ---- regressor ------------------------------------------------------------

template <class T>
constexpr PoseVector<T> kIdentityPose{T{1}, T{1}, T{0}, T{0}, T{0}};

std::size_t AlignerArch::feature_size() const {
    std::size_t s = input_size;
    for (std::size_t b = 0; b < channels.size(); ++b) s = conv_out_extent(s, kernel, stride, kernel / 2);
    return s;
}

void AlignerArch::validate() const {
    if (channels.empty()) throw ConfigError("aligner: at least one conv block required");
    if (!(output_scale > 0)) throw ConfigError("aligner: output scale must be positive");
    if (kernel % 2 == 0 || stride == 0) throw ConfigError("aligner: odd kernel and positive stride required");
    std::size_t s = input_size;
    for (std::size_t b = 0; b < channels.size(); ++b) {
        if (channels[b] == 0) throw ConfigError("aligner: empty conv block");
        if (s < kernel / 2 + 1) throw ConfigError("aligner: input too small for the conv stack");
        s = conv_out_extent(s, kernel, stride, kernel / 2);
    }
}

template <class T>
std::vector<std::string> BasicAlignerWeights<T>::param_names() const {
    std::vector<std::string> names;
    for (std::size_t b = 0; b < arch.channels.size(); ++b) {
        names.push_back("conv" + std::to_string(b) + ".weight");
        names.push_back("conv" + std::to_string(b) + ".bias");
    }
    names.push_back("head.weight");
    names.push_back("head.bias");
    return names;
}

template struct BasicAlignerWeights<float>;
template struct BasicAlignerWeights<double>;

AlignerWeights init_aligner(const AlignerArch& arch, std::uint64_t seed) {
    arch.validate();
    AlignerWeights w;
    w.arch = arch;
    w.init_seed = seed;
    std::size_t cin = 1;
    for (std::size_t b = 0; b < arch.channels.size(); ++b) {
        const std::size_t cout = arch.channels[b];
        Tensor k({cout, cin, arch.kernel, arch.kernel});
        std::mt19937_64 rng(derive_seed(seed, "align-conv" + std::to_string(b)));
        std::normal_distribution<float> n(0.0f, std::sqrt(2.0f / float(cin * arch.kernel * arch.kernel)));
        for (auto& v : k.values()) v = n(rng);
        w.params.push_back(std::move(k));
        w.params.push_back(Tensor({cout}));
        cin = cout;
    }
    w.params.push_back(Tensor({5, arch.flat_features()}));
    w.params.push_back(Tensor({5}));
    return w;
}

std::string aligner_hash(const AlignerWeights& w) {
    Fnv1a h;
    for (auto c : w.arch.channels) h.update_u64(c);
    h.update_u64(w.arch.input_size).update_u64(w.arch.stride).update_u64(w.arch.kernel);
    h.update(std::to_string(w.arch.output_scale));
    for (const auto& p : w.params) h.update(p);
    return h.hex();
}

template <class T>
AlignerTrace<T> aligner_forward(const BasicAlignerWeights<T>& w, const BasicTensor<T>& image) {
    const auto& a = w.arch;
    if (image.shape() != Shape{1, a.input_size, a.input_size}) {
        throw ShapeError("aligner expects [1," + std::to_string(a.input_size) + "," + std::to_string(a.input_size) +
                         "] images, got " + shape_string(image.shape()));
    }
    AlignerTrace<T> t;
    const BasicTensor<T>* in = &image;
    for (std::size_t b = 0; b < a.channels.size(); ++b) {
        t.inputs.push_back(*in);
        t.pre.push_back(conv2d<T>(*in, w.conv_w(b), w.conv_b(b).values(), a.stride, a.kernel / 2));
        t.outputs.push_back(relu(t.pre.back()));
        in = &t.outputs.back();
    }
    const auto& f = t.outputs.back();
    const std::size_t n = f.size();
    const T scale = static_cast<T>(a.output_scale);
    for (std::size_t o = 0; o < 5; ++o) {
        T acc = w.head_b()[o];
        const T* row = w.head_w().data() + o * n;
        for (std::size_t j = 0; j < n; ++j) acc += row[j] * f[j];
        t.pose[o] = kIdentityPose<T>[o] + scale * acc;
    }
    return t;
}

template <class T>
std::vector<BasicTensor<T>> aligner_backward(const BasicAlignerWeights<T>& w, const AlignerTrace<T>& trace,
                                             const PoseVector<T>& grad_pose) {
    const auto& a = w.arch;
    const std::size_t nb = a.channels.size();
    std::vector<BasicTensor<T>> g(w.params.size());
    const auto& f = trace.outputs.back();
    const std::size_t n = f.size();

    g[2 * nb] = BasicTensor<T>(w.head_w().shape());
    g[2 * nb + 1] = BasicTensor<T>({5});
    BasicTensor<T> up(f.shape());
    for (std::size_t o = 0; o < 5; ++o) {
        const T go = static_cast<T>(a.output_scale) * grad_pose[o];
        g[2 * nb + 1][o] = go;
        T* grow = g[2 * nb].data() + o * n;
        const T* wrow = w.head_w().data() + o * n;
        for (std::size_t j = 0; j < n; ++j) {
            grow[j] = go * f[j];
            up[j] += go * wrow[j];
        }
    }
    for (std::size_t bi = nb; bi-- > 0;) {
        const auto gpre = relu_backward(trace.pre[bi], up);
        auto cg = conv2d_backward(trace.inputs[bi], w.conv_w(bi), a.stride, a.kernel / 2, gpre, bi > 0, true);
        g[2 * bi] = std::move(cg.kernels);
        const std::size_t len = cg.bias.size();
        g[2 * bi + 1] = BasicTensor<T>({len}, std::move(cg.bias));
        if (bi > 0) up = std::move(cg.input);
    }
    return g;
}

AffineParams predict_pose(const AlignerWeights& w, const Tensor& image) {
    return AffineParams::from_array(aligner_forward(w, image).pose);
}

LossParts aligner_sample_loss(const AlignerWeights& w, const AlignmentObjective<float>& objective,
                              const Tensor& image, std::size_t pool_kernel, std::vector<Tensor>* grads) {
    const auto trace = aligner_forward(w, image);
    const auto phi = transform_image<float>(image, trace.pose, pool_kernel);
    if (!grads) return objective.value(phi);
    Tensor g_phi;
    const auto parts = objective.value_and_grad(phi, g_phi);
    const auto g_pose = transform_image_backward(image, trace.pose, pool_kernel, g_phi);
    *grads = aligner_backward(w, trace, g_pose);
    return parts;
}

// ---- training -------------------------------------------------------------

void AlignerTrainConfig::validate() const {
    if (!(lr > 0) || batch == 0) throw ConfigError("aligner training: lr and batch must be positive");
    if (pool_kernel == 0) throw ConfigError("aligner training: pool kernel must be positive");
}

Tensor smoothed_anchor(const AnchorImage& anchor, std::size_t pool_kernel) {
    return transform_image(anchor.image, AffineParams{}, pool_kernel);
}

AlignerTrainResult train_aligner(AlignerWeights weights, const Split& train, const AnchorImage& anchor,
                                 const ModelWeights& extractor, const AlignerTrainConfig& config) {
    config.validate();
    const AlignmentObjective<float> objective(smoothed_anchor(anchor, config.pool_kernel), &extractor, config.layers);
    AlignerTrainResult result{std::move(weights), {}, {}, model_hash(extractor), {}};
    auto& w = result.weights;
    const std::size_t n = train.samples.size();
    std::vector<std::size_t> order(n);
    std::size_t batch_index = 0;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 rng(derive_seed(config.seed, std::uint64_t{epoch}));
        std::shuffle(order.begin(), order.end(), rng);
        LossParts sum;

        for (std::size_t start = 0; start < n; start += config.batch, ++batch_index) {
            const std::size_t bs = std::min(config.batch, n - start);
            std::vector<std::vector<Tensor>> per_sample(bs);
            std::vector<LossParts> parts(bs);
            parallel_for(bs, [&](std::size_t i) {
                const auto& img = train.samples[order[start + i]].image;
                parts[i] = aligner_sample_loss(w, objective, img, config.pool_kernel, &per_sample[i]);
            });
            double batch_loss = 0.0;
            for (std::size_t i = 0; i < bs; ++i) {
                batch_loss += parts[i].total;
                sum.total += parts[i].total;
                sum.perceptual += parts[i].perceptual;
                sum.euclidean += parts[i].euclidean;
            }
            batch_loss /= double(bs);
            if (!std::isfinite(batch_loss)) {
                throw TrainingError("aligner loss became non-finite at batch " + std::to_string(batch_index),
                                    batch_index);
            }
            // Ordered reduction of the per-sample gradients: independent of
            // the worker count.
            const float scale = static_cast<float>(config.lr / double(bs));
            std::vector<Tensor> grads = per_sample[0];
            for (std::size_t i = 1; i < bs; ++i) {
                for (std::size_t p = 0; p < grads.size(); ++p) {
                    for (std::size_t j = 0; j < grads[p].size(); ++j) grads[p][j] += per_sample[i][p][j];
                }
            }
            for (std::size_t p = 0; p < grads.size(); ++p) {
                if (!grads[p].all_finite()) {
                    throw TrainingError("aligner gradient became non-finite at batch " + std::to_string(batch_index),
                                        batch_index);
                }
                for (std::size_t j = 0; j < grads[p].size(); ++j) w.params[p][j] -= scale * grads[p][j];
            }
            for (std::size_t p = 0; p < w.params.size(); ++p) {
                if (!w.params[p].all_finite()) {
                    throw TrainingError("aligner weights became non-finite at batch " + std::to_string(batch_index),
                                        batch_index);
                }
            }
            result.batch_losses.push_back(batch_loss);
        }
        const double cnt = n ? double(n) : 1.0;
        result.curve.push_back({epoch + 1, {sum.total / cnt, sum.perceptual / cnt, sum.euclidean / cnt}});
    }
    result.extractor_hash_after = model_hash(extractor);
    return result;
}

LossParts mean_alignment_loss(const AlignerWeights& w, const Split& split, const AnchorImage& anchor,
                              const ModelWeights& extractor, const std::vector<std::size_t>& layers,
                              std::size_t pool_kernel) {
    const AlignmentObjective<float> objective(smoothed_anchor(anchor, pool_kernel), &extractor, layers);
    std::vector<LossParts> parts(split.samples.size());
    parallel_for(split.samples.size(), [&](std::size_t i) {
        parts[i] = aligner_sample_loss(w, objective, split.samples[i].image, pool_kernel, nullptr);
    });
    LossParts m;
    for (const auto& p : parts) m.total += p.total, m.perceptual += p.perceptual, m.euclidean += p.euclidean;
    const double cnt = parts.empty() ? 1.0 : double(parts.size());
    return {m.total / cnt, m.perceptual / cnt, m.euclidean / cnt};
}

// ---- inference ------------------------------------------------------------

GtBox align_box(const GtBox& box, const AffineParams& predicted, std::size_t size) {
    // aligned(u) = observed(A u), so an observed point v lands at A^-1 v.
    const auto inv = invert_affine(affine_matrix64(predicted));
    auto [lo_x, lo_y, hi_x, hi_y] = map_edge_ellipse(inv, box.x, box.y, box.w, box.h, size);
    const double n = double(size);
    lo_x = std::clamp(lo_x, 0.0, n), hi_x = std::clamp(hi_x, 0.0, n);
    lo_y = std::clamp(lo_y, 0.0, n), hi_y = std::clamp(hi_y, 0.0, n);
    return {box.class_id, lo_x, lo_y, hi_x - lo_x, hi_y - lo_y};
}

GtBox smooth_box(const GtBox& box, std::size_t size, std::size_t pool_kernel) {
    // Pooled cell i is centred at k*i + k/2; the align-corners resample puts
    // it at output centre i*(H-1)/(H/k-1) + 1/2.
    const double k = double(pool_kernel), n = double(size), cells = n / k;
    if (cells <= 1.0) return box;
    const double gain = (n - 1.0) / (cells - 1.0) / k;
    auto map = [&](double v) { return std::clamp((v - k / 2) * gain + 0.5, 0.0, n); };
    const double x0 = map(box.x), x1 = map(box.x + box.w), y0 = map(box.y), y1 = map(box.y + box.h);
    return {box.class_id, x0, y0, x1 - x0, y1 - y0};
}

AlignedSplit align_dataset(const AlignerWeights& w, const Split& split, std::size_t pool_kernel, bool smooth) {
    AlignedSplit out{split, std::vector<AffineParams>(split.samples.size())};
    parallel_for(split.samples.size(), [&](std::size_t i) {
        auto& s = out.split.samples[i];
        const auto pose = predict_pose(w, s.image);
        out.predicted[i] = pose;
        s.image = smooth ? transform_image(s.image, pose, pool_kernel) : affine_warp(s.image, affine_matrix(pose));
        for (auto& b : s.boxes) {
            b = align_box(b, pose, s.image.dim(1));
            if (smooth) b = smooth_box(b, s.image.dim(1), pool_kernel);
        }
    });
    return out;
}

// ---- checkpoints ----------------------------------------------------------

void save_aligner(const AlignerWeights& w, const std::filesystem::path& dir, const std::string& extra_json) {
    std::filesystem::create_directories(dir);
    const auto names = w.param_names();
    json files = json::object();
    for (std::size_t i = 0; i < names.size(); ++i) {
        write_dmt(dir / (names[i] + ".dmt"), w.params[i]);
        files[names[i]] = hash_tensor(w.params[i]);
    }
    json meta{{"architecture",
               {{"input_size", w.arch.input_size},
                {"channels", w.arch.channels},
                {"stride", w.arch.stride},
                {"kernel", w.arch.kernel},
                {"output_scale", w.arch.output_scale}}},
              {"init_seed", w.init_seed},
              {"aligner_hash", aligner_hash(w)},
              {"files", files}};
    const json extra = json::parse(extra_json);
    for (const auto& [k, v] : extra.items()) meta[k] = v;
    write_json(dir / "meta.json", meta);
}

AlignerWeights load_aligner(const std::filesystem::path& dir) {
    const json meta = read_json(dir / "meta.json");
    AlignerWeights w;
    try {
        const auto& a = meta.at("architecture");
        w.arch.input_size = a.at("input_size").get<std::size_t>();
        w.arch.channels = a.at("channels").get<std::vector<std::size_t>>();
        w.arch.stride = a.at("stride").get<std::size_t>();
        w.arch.kernel = a.at("kernel").get<std::size_t>();
        w.arch.output_scale = a.at("output_scale").get<double>();
        w.init_seed = meta.at("init_seed").get<std::uint64_t>();
        const auto ref = init_aligner(w.arch, 0);
        const auto names = ref.param_names();
        for (std::size_t i = 0; i < names.size(); ++i) {
            const auto path = dir / (names[i] + ".dmt");
            if (!std::filesystem::exists(path)) throw CorruptionError("missing aligner tensor " + path.string());
            Tensor t = read_dmt(path);
            if (t.shape() != ref.params[i].shape()) throw CorruptionError(path.string() + ": unexpected shape");
            if (meta.at("files").value(names[i], std::string{}) != hash_tensor(t)) {
                throw CorruptionError(path.string() + ": content hash does not match meta.json");
            }
            w.params.push_back(std::move(t));
        }
    } catch (const json::exception& e) {
        throw CorruptionError((dir / "meta.json").string() + ": " + e.what());
    }
    return w;
}

// ---- instantiations -------------------------------------------------------

#define DMLOC_INSTANTIATE(T)                                                                                       \
    template BasicTensor<T> transform_image(const BasicTensor<T>&, const PoseVector<T>&, std::size_t);             \
    template class AlignmentObjective<T>;                                                                           \
    template LossParts alignment_loss(const BasicTensor<T>&, const BasicTensor<T>&, const BasicModelWeights<T>*,   \
                                      const std::vector<std::size_t>&);                                            \
    template AlignerTrace<T> aligner_forward(const BasicAlignerWeights<T>&, const BasicTensor<T>&);                \
    template std::vector<BasicTensor<T>> aligner_backward(const BasicAlignerWeights<T>&, const AlignerTrace<T>&,   \
                                                          const PoseVector<T>&);

DMLOC_INSTANTIATE(float)
DMLOC_INSTANTIATE(double)

#undef DMLOC_INSTANTIATE

}  // namespace dmloc
