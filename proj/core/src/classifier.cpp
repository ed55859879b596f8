#include "dmloc/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "dmloc/loc_eval.hpp"
#include "dmloc/ops.hpp"
#include "dmloc/util.hpp"
#include "json_io.hpp"

namespace dmloc {

std::size_t Architecture::feature_size() const {
    std::size_t s = input_size;
    for (std::size_t b = 0; b < blocks(); ++b) s = conv_out_extent(s, kernel, strides.at(b), kernel / 2);
    return s;
}

void Architecture::validate() const {
    if (channels.empty() || channels.size() != strides.size()) {
        throw ConfigError("architecture: channels and strides must be non-empty and of equal length");
    }
    if (kernel == 0 || kernel % 2 == 0) throw ConfigError("architecture: kernel must be odd");
    if (num_classes == 0) throw ConfigError("architecture: num_classes must be positive");
    for (auto c : channels) {
        if (c == 0) throw ConfigError("architecture: channel counts must be positive");
    }
    for (auto s : strides) {
        if (s == 0) throw ConfigError("architecture: strides must be positive");
    }
    if (feature_size() < 4) {
        throw ConfigError("architecture: final feature size " + std::to_string(feature_size()) + " is below 4");
    }
}

template <class T>
std::vector<std::string> BasicModelWeights<T>::param_names() const {
    std::vector<std::string> names;
    for (std::size_t b = 0; b < arch.blocks(); ++b) {
        names.push_back("conv" + std::to_string(b) + ".weight");
        names.push_back("conv" + std::to_string(b) + ".bias");
    }
    names.push_back("head.weight");
    names.push_back("head.bias");
    return names;
}

template struct BasicModelWeights<float>;
template struct BasicModelWeights<double>;

ModelWeights init_model(const Architecture& arch, std::uint64_t seed) {
    arch.validate();
    ModelWeights w;
    w.arch = arch;
    w.init_seed = seed;
    std::size_t cin = 1;
    for (std::size_t b = 0; b < arch.blocks(); ++b) {
        const std::size_t cout = arch.channels[b];
        Tensor k({cout, cin, arch.kernel, arch.kernel});
        std::mt19937_64 rng(derive_seed(seed, "conv" + std::to_string(b)));
        std::normal_distribution<float> n(0.0f, std::sqrt(2.0f / float(cin * arch.kernel * arch.kernel)));
        for (auto& v : k.values()) v = n(rng);
        w.params.push_back(std::move(k));
        w.params.push_back(Tensor({cout}));
        cin = cout;
    }
    Tensor head({arch.num_classes, cin});
    std::mt19937_64 rng(derive_seed(seed, "head"));
    std::normal_distribution<float> n(0.0f, 0.01f);
    for (auto& v : head.values()) v = n(rng);
    w.params.push_back(std::move(head));
    w.params.push_back(Tensor({arch.num_classes}));
    return w;
}

std::string model_hash(const ModelWeights& w) {
    Fnv1a h;
    for (auto c : w.arch.channels) h.update_u64(c);
    for (auto s : w.arch.strides) h.update_u64(s);
    h.update_u64(w.arch.input_size).update_u64(w.arch.kernel).update_u64(w.arch.num_classes);
    for (const auto& p : w.params) h.update(p);
    return h.hex();
}

// ---- backbone -------------------------------------------------------------

template <class T>
BackboneTrace<T> backbone_forward(const BasicModelWeights<T>& w, const BasicTensor<T>& image) {
    const auto& a = w.arch;
    if (image.shape() != Shape{1, a.input_size, a.input_size}) {
        throw ShapeError("classifier expects [1," + std::to_string(a.input_size) + "," + std::to_string(a.input_size) +
                         "] images, got " + shape_string(image.shape()));
    }
    BackboneTrace<T> t;
    const BasicTensor<T>* in = &image;
    for (std::size_t b = 0; b < a.blocks(); ++b) {
        t.inputs.push_back(*in);
        t.pre.push_back(conv2d<T>(*in, w.conv_w(b), w.conv_b(b).values(), a.strides[b], a.kernel / 2));
        t.outputs.push_back(relu(t.pre.back()));
        in = &t.outputs.back();
    }
    return t;
}

template <class T>
BackboneGrads<T> backbone_backward(const BasicModelWeights<T>& w, const BackboneTrace<T>& trace,
                                   const std::vector<BasicTensor<T>>& grad_outputs, bool need_params,
                                   bool need_input) {
    const auto& a = w.arch;
    if (grad_outputs.size() != a.blocks()) throw ShapeError("backbone_backward: one gradient slot per block expected");
    BackboneGrads<T> g;
    if (need_params) {
        for (std::size_t b = 0; b < a.blocks(); ++b) {
            g.params.emplace_back(w.conv_w(b).shape());
            g.params.emplace_back(w.conv_b(b).shape());
        }
    }
    std::ptrdiff_t deepest = -1;
    for (std::size_t b = 0; b < a.blocks(); ++b) {
        if (!grad_outputs[b].empty()) deepest = static_cast<std::ptrdiff_t>(b);
    }
    if (deepest < 0) {
        if (need_input) g.input = BasicTensor<T>(trace.inputs.front().shape());
        return g;
    }
    BasicTensor<T> up = grad_outputs[static_cast<std::size_t>(deepest)];
    for (std::ptrdiff_t bi = deepest; bi >= 0; --bi) {
        const auto b = static_cast<std::size_t>(bi);
        if (bi < deepest && !grad_outputs[b].empty()) {
            const auto& extra = grad_outputs[b];
            if (extra.shape() != up.shape()) throw ShapeError("backbone_backward: gradient shape mismatch");
            for (std::size_t i = 0; i < up.size(); ++i) up[i] += extra[i];
        }
        const auto gpre = relu_backward(trace.pre[b], up);
        const bool want_input = b > 0 || need_input;
        auto cg = conv2d_backward(trace.inputs[b], w.conv_w(b), a.strides[b], a.kernel / 2, gpre, want_input,
                                  need_params);
        if (need_params) {
            g.params[2 * b] = std::move(cg.kernels);
            const std::size_t nb = cg.bias.size();
            g.params[2 * b + 1] = BasicTensor<T>({nb}, std::move(cg.bias));
        }
        if (want_input) up = std::move(cg.input);
    }
    if (need_input) g.input = std::move(up);
    return g;
}

// ---- head -----------------------------------------------------------------

void validate_masks(const Architecture& arch, MaskSpan<float> masks) {
    if (masks.empty()) return;
    const std::size_t p = arch.feature_size();
    if (masks.size() != arch.num_classes) {
        throw ConfigError("mask set has " + std::to_string(masks.size()) + " masks for " +
                          std::to_string(arch.num_classes) + " classes");
    }
    for (const auto& m : masks) {
        if (m.shape() != Shape{p, p}) {
            throw ShapeError("mask shape " + shape_string(m.shape()) + " does not match feature size " +
                             std::to_string(p));
        }
        for (float v : m.values()) {
            if (!(v >= 0.0f && v <= 1.0f)) throw ConfigError("mask values must lie in [0,1]");
        }
    }
}

std::vector<Tensor> shared_mask_set(MaskSpan<float> masks) {
    if (masks.empty()) return {};
    Tensor shared = masks[0];
    for (const auto& m : masks) {
        if (m.shape() != shared.shape()) throw ShapeError("shared_mask_set: masks differ in shape");
        for (std::size_t i = 0; i < m.size(); ++i) shared[i] = std::max(shared[i], m[i]);
    }
    return std::vector<Tensor>(masks.size(), shared);
}

template <class T>
ForwardResult<T> forward(const BasicModelWeights<T>& w, const BasicTensor<T>& image, MaskSpan<T> masks) {
    const auto& a = w.arch;
    const std::size_t k = a.num_classes, ch = a.feature_channels();
    if (!masks.empty()) {
        const std::size_t p = a.feature_size();
        if (masks.size() != k) throw ConfigError("forward: one mask per class required");
        for (const auto& m : masks) {
            if (m.shape() != Shape{p, p}) throw ShapeError("forward: mask must be " + std::to_string(p) + "x" +
                                                           std::to_string(p) + ", got " + shape_string(m.shape()));
        }
    }
    ForwardResult<T> r;
    r.trace = backbone_forward(w, image);
    const auto& f = r.features();
    if (masks.empty()) {
        r.pooled.assign(k, global_avg_pool(f));
    } else {
        for (std::size_t c = 0; c < k; ++c) r.pooled.push_back(global_avg_pool(fuse_attention(f, masks[c])));
    }
    const auto& hw = w.head_w();
    for (std::size_t c = 0; c < k; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < ch; ++j) acc += double(hw[c * ch + j]) * double(r.pooled[c][j]);
        r.logits.push_back(static_cast<T>(acc + double(w.head_b()[c])));
    }
    for (T z : r.logits) r.probs.push_back(sigmoid_scalar(z));
    return r;
}

template <class T>
std::vector<BasicTensor<T>> backward(const BasicModelWeights<T>& w, const ForwardResult<T>& fwd,
                                     std::span<const T> grad_logits, MaskSpan<T> masks) {
    const auto& a = w.arch;
    const std::size_t k = a.num_classes, ch = a.feature_channels(), p = a.feature_size(), area = p * p;
    if (grad_logits.size() != k) throw ShapeError("backward: one logit gradient per class expected");
    const auto& hw = w.head_w();

    BasicTensor<T> d_hw(hw.shape()), d_hb({k});
    for (std::size_t c = 0; c < k; ++c) {
        d_hb[c] = grad_logits[c];
        for (std::size_t j = 0; j < ch; ++j) d_hw[c * ch + j] = grad_logits[c] * fwd.pooled[c][j];
    }

    // Summation order matches between the two branches so that an all-zero
    // mask reproduces the unmasked gradient bit for bit.
    BasicTensor<T> df({ch, p, p});
    const T inv_area = T{1} / static_cast<T>(area);
    std::vector<T> coef(k);
    for (std::size_t j = 0; j < ch; ++j) {
        for (std::size_t c = 0; c < k; ++c) coef[c] = grad_logits[c] * hw[c * ch + j];
        T* out = df.data() + j * area;
        if (masks.empty()) {
            T acc{0};
            for (std::size_t c = 0; c < k; ++c) acc += coef[c];
            std::fill_n(out, area, acc * inv_area);
        } else {
            for (std::size_t x = 0; x < area; ++x) {
                T acc{0};
                for (std::size_t c = 0; c < k; ++c) acc += coef[c] * (masks[c][x] + T{1});
                out[x] = acc * inv_area;
            }
        }
    }
    std::vector<BasicTensor<T>> slots(a.blocks());
    slots.back() = std::move(df);
    auto bg = backbone_backward(w, fwd.trace, slots, true, false);
    auto grads = std::move(bg.params);
    grads.push_back(std::move(d_hw));
    grads.push_back(std::move(d_hb));
    return grads;
}

// ---- loss -----------------------------------------------------------------

template <class T>
BceStats weighted_bce(std::span<const T> probs, std::span<const std::uint8_t> labels) {
    if (probs.size() != labels.size()) throw ShapeError("weighted_bce: probabilities and labels differ in length");
    BceStats s;
    double sp = 0.0, sn = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const double p = std::clamp(static_cast<double>(probs[i]), kProbClamp, 1.0 - kProbClamp);
        if (labels[i]) {
            ++s.positives;
            sp -= std::log(p);
        } else {
            ++s.negatives;
            sn -= std::log(1.0 - p);
        }
    }
    const double total = double(s.positives + s.negatives);
    s.w_pos = s.positives ? total / double(s.positives) : 0.0;
    s.w_neg = s.negatives ? total / double(s.negatives) : 0.0;
    s.degenerate = s.positives == 0 || s.negatives == 0;
    s.loss = s.w_pos * sp + s.w_neg * sn;
    return s;
}

template <class T>
std::vector<T> weighted_bce_grad_logits(std::span<const T> probs, std::span<const std::uint8_t> labels) {
    const auto s = weighted_bce(probs, labels);
    std::vector<T> g(probs.size(), T{0});
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const double p = static_cast<double>(probs[i]);
        if (p < kProbClamp || p > 1.0 - kProbClamp) continue;  // flat beyond the clamp
        g[i] = static_cast<T>(labels[i] ? -s.w_pos * (1.0 - p) : s.w_neg * p);
    }
    return g;
}

// ---- training -------------------------------------------------------------

namespace {

struct Adam {
    std::vector<Tensor> m, v;
    std::size_t t = 0;

    explicit Adam(const ModelWeights& w) {
        for (const auto& p : w.params) {
            m.emplace_back(p.shape());
            v.emplace_back(p.shape());
        }
    }

    void step(ModelWeights& w, const std::vector<Tensor>& grads, const TrainConfig& c) {
        ++t;
        const double bc1 = 1.0 - std::pow(c.beta1, double(t)), bc2 = 1.0 - std::pow(c.beta2, double(t));
        const float b1 = float(c.beta1), b2 = float(c.beta2);
        for (std::size_t i = 0; i < w.params.size(); ++i) {
            auto& p = w.params[i];
            for (std::size_t j = 0; j < p.size(); ++j) {
                const float g = grads[i][j];
                m[i][j] = b1 * m[i][j] + (1.0f - b1) * g;
                v[i][j] = b2 * v[i][j] + (1.0f - b2) * g * g;
                const double mh = m[i][j] / bc1, vh = v[i][j] / bc2;
                p[j] -= static_cast<float>(c.lr * mh / (std::sqrt(vh) + c.adam_eps));
            }
        }
    }
};

std::vector<Tensor> zeros_like(const ModelWeights& w) {
    std::vector<Tensor> z;
    for (const auto& p : w.params) z.emplace_back(p.shape());
    return z;
}

}  // namespace

std::vector<double> per_class_auc(const Tensor& probs, const Split& split) {
    const std::size_t n = probs.dim(0), k = probs.dim(1);
    if (n != split.samples.size()) throw ShapeError("per_class_auc: score rows do not match split size");
    std::vector<double> auc(k, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t c = 0; c < k; ++c) {
        std::vector<float> s(n);
        std::vector<std::uint8_t> l(n);
        std::size_t pos = 0;
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = probs[i * k + c];
            l[i] = split.samples[i].labels.at(c);
            pos += l[i] != 0;
        }
        if (pos > 0 && pos < n) auc[c] = roc_auc(s, l);
    }
    return auc;
}

TrainResult train_classifier(ModelWeights weights, const Split& train, const Split* val, const TrainConfig& config,
                             MaskSpan<float> masks) {
    if (config.lr <= 0 || config.batch == 0) throw ConfigError("train_classifier: lr and batch must be positive");
    validate_masks(weights.arch, masks);
    const std::size_t k = weights.arch.num_classes;
    for (const auto& s : train.samples) {
        if (s.labels.size() != k) throw ConfigError("train_classifier: label width does not match the model");
    }

    TrainResult result{std::move(weights), {}};
    auto& w = result.weights;
    Adam adam(w);
    const std::size_t n = train.samples.size();
    std::vector<std::size_t> order(n);
    std::size_t batch_index = 0;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 rng(derive_seed(config.seed, std::uint64_t{epoch}));
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        std::size_t epoch_batches = 0;

        for (std::size_t start = 0; start < n; start += config.batch, ++batch_index) {
            const std::size_t bs = std::min(config.batch, n - start);
            std::vector<ForwardResult<float>> fwd(bs);
            parallel_for(bs, [&](std::size_t i) { fwd[i] = forward(w, train.samples[order[start + i]].image, masks); });

            std::vector<float> probs(bs * k);
            std::vector<std::uint8_t> labels(bs * k);
            for (std::size_t i = 0; i < bs; ++i) {
                std::copy(fwd[i].probs.begin(), fwd[i].probs.end(), probs.begin() + long(i * k));
                const auto& l = train.samples[order[start + i]].labels;
                std::copy(l.begin(), l.end(), labels.begin() + long(i * k));
            }
            const auto stats = weighted_bce<float>(probs, labels);
            if (!std::isfinite(stats.loss)) {
                throw TrainingError("classifier loss became non-finite at batch " + std::to_string(batch_index),
                                    batch_index);
            }
            result.trace.degenerate_batches += stats.degenerate;
            const auto dlogits = weighted_bce_grad_logits<float>(probs, labels);

            std::vector<std::vector<Tensor>> per_sample(bs);
            parallel_for(bs, [&](std::size_t i) {
                per_sample[i] = backward(w, fwd[i], std::span<const float>(dlogits).subspan(i * k, k), masks);
            });
            auto grads = zeros_like(w);
            for (const auto& g : per_sample) {
                for (std::size_t p = 0; p < grads.size(); ++p) {
                    for (std::size_t j = 0; j < grads[p].size(); ++j) grads[p][j] += g[p][j];
                }
            }
            for (const auto& g : grads) {
                if (!g.all_finite()) {
                    throw TrainingError("classifier gradient became non-finite at batch " + std::to_string(batch_index),
                                        batch_index);
                }
            }
            adam.step(w, grads, config);
            result.trace.batch_losses.push_back(stats.loss);
            epoch_loss += stats.loss;
            ++epoch_batches;
        }

        EpochMetrics m;
        m.epoch = epoch + 1;
        m.train_loss = epoch_batches ? epoch_loss / double(epoch_batches) : 0.0;
        if (val && !val->samples.empty()) {
            m.val_auc = per_class_auc(predict_scores(w, *val, masks).probs, *val);
            double sum = 0.0;
            std::size_t cnt = 0;
            for (double a : m.val_auc) {
                if (!std::isnan(a)) sum += a, ++cnt;
            }
            m.mean_val_auc = cnt ? sum / double(cnt) : std::numeric_limits<double>::quiet_NaN();
        }
        result.trace.epochs.push_back(std::move(m));
    }
    return result;
}

Scores predict_scores(const ModelWeights& w, const Split& split, MaskSpan<float> masks) {
    validate_masks(w.arch, masks);
    const std::size_t n = split.samples.size(), k = w.arch.num_classes;
    Scores s{Tensor({std::max<std::size_t>(n, 1), k}), Tensor({std::max<std::size_t>(n, 1), k})};
    if (n == 0) return s;
    parallel_for(n, [&](std::size_t i) {
        const auto r = forward(w, split.samples[i].image, masks);
        for (std::size_t c = 0; c < k; ++c) {
            s.probs[i * k + c] = r.probs[c];
            s.logits[i * k + c] = r.logits[c];
        }
    });
    return s;
}

// ---- checkpoints ----------------------------------------------------------

namespace {

json arch_json(const Architecture& a) {
    return json{{"input_size", a.input_size}, {"channels", a.channels}, {"strides", a.strides},
                {"kernel", a.kernel},         {"num_classes", a.num_classes}};
}

Architecture arch_from_json(const json& j) {
    Architecture a;
    a.input_size = j.at("input_size").get<std::size_t>();
    a.channels = j.at("channels").get<std::vector<std::size_t>>();
    a.strides = j.at("strides").get<std::vector<std::size_t>>();
    a.kernel = j.at("kernel").get<std::size_t>();
    a.num_classes = j.at("num_classes").get<std::size_t>();
    return a;
}

}  // namespace

void save_model(const ModelWeights& w, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const auto names = w.param_names();
    json files = json::object();
    for (std::size_t i = 0; i < names.size(); ++i) {
        write_dmt(dir / (names[i] + ".dmt"), w.params[i]);
        files[names[i]] = hash_tensor(w.params[i]);
    }
    write_json(dir / "model.json", json{{"architecture", arch_json(w.arch)},
                                       {"init_seed", w.init_seed},
                                       {"model_hash", model_hash(w)},
                                       {"files", files}});
}

ModelWeights load_model(const std::filesystem::path& dir) {
    const json meta = read_json(dir / "model.json");
    ModelWeights w;
    try {
        w.arch = arch_from_json(meta.at("architecture"));
        w.init_seed = meta.at("init_seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw CorruptionError((dir / "model.json").string() + ": " + e.what());
    }
    w.arch.validate();
    const auto ref = init_model(w.arch, 0);
    const auto names = ref.param_names();
    for (std::size_t i = 0; i < names.size(); ++i) {
        const auto path = dir / (names[i] + ".dmt");
        if (!std::filesystem::exists(path)) throw CorruptionError("missing model tensor " + path.string());
        Tensor t = read_dmt(path);
        if (t.shape() != ref.params[i].shape()) throw CorruptionError(path.string() + ": unexpected shape");
        if (!meta.at("files").contains(names[i]) || meta["files"][names[i]].get<std::string>() != hash_tensor(t)) {
            throw CorruptionError(path.string() + ": content hash does not match model.json");
        }
        w.params.push_back(std::move(t));
    }
    return w;
}

// ---- instantiations -------------------------------------------------------

#define DMLOC_INSTANTIATE(T)                                                                                       \
    template BackboneTrace<T> backbone_forward(const BasicModelWeights<T>&, const BasicTensor<T>&);                \
    template BackboneGrads<T> backbone_backward(const BasicModelWeights<T>&, const BackboneTrace<T>&,              \
                                                const std::vector<BasicTensor<T>>&, bool, bool);                   \
    template ForwardResult<T> forward(const BasicModelWeights<T>&, const BasicTensor<T>&, MaskSpan<T>);            \
    template std::vector<BasicTensor<T>> backward(const BasicModelWeights<T>&, const ForwardResult<T>&,            \
                                                  std::span<const T>, MaskSpan<T>);                               \
    template BceStats weighted_bce(std::span<const T>, std::span<const std::uint8_t>);                             \
    template std::vector<T> weighted_bce_grad_logits(std::span<const T>, std::span<const std::uint8_t>);

DMLOC_INSTANTIATE(float)
DMLOC_INSTANTIATE(double)

#undef DMLOC_INSTANTIATE

}  // namespace dmloc
