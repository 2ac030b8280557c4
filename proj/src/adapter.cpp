#include "mpft/adapter.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

namespace mpft {
namespace {

enum : std::uint64_t {
    kStreamHead = 51,
    kStreamAdapterInit = 52,
    kStreamFewShot = 53,
    kStreamShuffle = 54,
};

void normalize_or_throw(std::span<double> v, const char* what) {
    double n = std::sqrt(squared_norm(v));
    if (n < 1e-12) throw ConfigError(std::string(what) + ": zero-norm vector");
    for (double& x : v) x /= n;
}

}  // namespace

ClassificationHead build_head(int num_classes, std::size_t d_emb, std::uint64_t seed,
                              int variants_per_class, HeadMode mode, double temperature) {
    if (num_classes < 2) throw ConfigError("head: need at least 2 classes");
    if (variants_per_class < 1) throw ConfigError("head: variants_per_class must be >= 1");
    if (temperature <= 0.0) throw ConfigError("head: temperature must be positive");

    Matrix anchors(num_classes, d_emb);
    for (int k = 0; k < num_classes; ++k) {
        Rng rng(derive_seed(seed, kStreamHead, static_cast<std::uint64_t>(k)));
        std::vector<double> avg(d_emb, 0.0);
        for (int v = 0; v < variants_per_class; ++v) {
            std::vector<double> unit = rng.gaussian_vector(d_emb);
            normalize_or_throw(unit, "head");
            for (std::size_t j = 0; j < d_emb; ++j) avg[j] += unit[j];
        }
        for (double& x : avg) x /= variants_per_class;
        std::copy(avg.begin(), avg.end(), anchors.row(k).begin());
    }
    return head_from_anchors(std::move(anchors), mode, temperature);
}

ClassificationHead head_from_anchors(Matrix anchors, HeadMode mode, double temperature) {
    if (anchors.rows < 2) throw ConfigError("head: need at least 2 classes");
    if (temperature <= 0.0) throw ConfigError("head: temperature must be positive");
    ClassificationHead head;
    head.mode = mode;
    head.temperature = temperature;
    if (mode == HeadMode::cosine)
        for (std::size_t k = 0; k < anchors.rows; ++k)
            normalize_or_throw(anchors.row(k), "head anchor");
    head.anchors = std::move(anchors);
    return head;
}

Adapter Adapter::make_linear(std::size_t d_emb, std::uint64_t seed) {
    Adapter a;
    a.kind = AdapterKind::linear;
    a.d_emb = d_emb;
    a.w = Matrix(d_emb, d_emb);
    a.b = Matrix(d_emb, 1);
    Rng rng(derive_seed(seed, kStreamAdapterInit));
    double scale = 1.0 / std::sqrt(static_cast<double>(d_emb));
    for (double& v : a.w.data) v = rng.gaussian(0.0, scale);
    return a;
}

Adapter Adapter::identity_linear(std::size_t d_emb) {
    Adapter a;
    a.kind = AdapterKind::linear;
    a.d_emb = d_emb;
    a.w = Matrix(d_emb, d_emb);
    a.b = Matrix(d_emb, 1);
    for (std::size_t i = 0; i < d_emb; ++i) a.w.at(i, i) = 1.0;
    return a;
}

Adapter Adapter::make_bottleneck(std::size_t d_emb, std::size_t hidden, double rho,
                                 std::uint64_t seed) {
    if (hidden < 1) throw ConfigError("adapter: hidden width must be >= 1");
    if (rho < 0.0 || rho > 1.0) throw ConfigError("adapter: residual weight in [0, 1]");
    Adapter a;
    a.kind = AdapterKind::bottleneck;
    a.d_emb = d_emb;
    a.hidden = hidden;
    a.residual_weight = rho;
    a.w1 = Matrix(hidden, d_emb);
    a.b1 = Matrix(hidden, 1);
    a.w2 = Matrix(d_emb, hidden);
    a.b2 = Matrix(d_emb, 1);
    Rng rng(derive_seed(seed, kStreamAdapterInit));
    double s1 = 1.0 / std::sqrt(static_cast<double>(d_emb));
    double s2 = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (double& v : a.w1.data) v = rng.gaussian(0.0, s1);
    for (double& v : a.w2.data) v = rng.gaussian(0.0, s2);
    return a;
}

std::vector<Matrix*> Adapter::params() {
    if (kind == AdapterKind::linear) return {&w, &b};
    return {&w1, &b1, &w2, &b2};
}

std::vector<const Matrix*> Adapter::params() const {
    if (kind == AdapterKind::linear) return {&w, &b};
    return {&w1, &b1, &w2, &b2};
}

std::size_t Adapter::param_count() const {
    std::size_t n = 0;
    for (const Matrix* m : params()) n += m->size();
    return n;
}

std::vector<double> flatten(const Adapter& adapter) {
    std::vector<double> out;
    out.reserve(adapter.param_count());
    for (const Matrix* m : adapter.params())
        out.insert(out.end(), m->data.begin(), m->data.end());
    return out;
}

void unflatten(Adapter& adapter, std::span<const double> values) {
    if (values.size() != adapter.param_count())
        throw ConfigError("unflatten: size mismatch");
    std::size_t pos = 0;
    for (Matrix* m : adapter.params()) {
        std::copy(values.begin() + pos, values.begin() + pos + m->size(),
                  m->data.begin());
        pos += m->size();
    }
}

double param_distance(const Adapter& a, const Adapter& b) {
    auto pa = a.params();
    auto pb = b.params();
    if (pa.size() != pb.size()) throw ConfigError("param_distance: kind mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (!pa[i]->same_shape(*pb[i]))
            throw ConfigError("param_distance: shape mismatch");
        for (std::size_t j = 0; j < pa[i]->size(); ++j) {
            double d = pa[i]->data[j] - pb[i]->data[j];
            s += d * d;
        }
    }
    return std::sqrt(s);
}

namespace {

struct ForwardCache {
    std::vector<double> pre1;  // bottleneck: W1 e + b1
    std::vector<double> h;     // relu(pre1)
    std::vector<double> a;     // adapter output
    std::vector<double> u;     // a / ||a|| (cosine head)
    double a_norm = 0.0;
    std::vector<double> logits;
};

void adapter_forward_cached(const Adapter& adapter, std::span<const double> e,
                            ForwardCache& c) {
    if (e.size() != adapter.d_emb) throw ConfigError("adapter: embedding size mismatch");
    if (adapter.kind == AdapterKind::linear) {
        c.a = matvec(adapter.w, e);
        for (std::size_t j = 0; j < c.a.size(); ++j) c.a[j] += adapter.b.data[j];
        return;
    }
    c.pre1 = matvec(adapter.w1, e);
    for (std::size_t j = 0; j < c.pre1.size(); ++j) c.pre1[j] += adapter.b1.data[j];
    c.h.resize(c.pre1.size());
    for (std::size_t j = 0; j < c.pre1.size(); ++j) c.h[j] = std::max(0.0, c.pre1[j]);
    c.a = matvec(adapter.w2, c.h);
    const double rho = adapter.residual_weight;
    for (std::size_t j = 0; j < c.a.size(); ++j)
        c.a[j] = rho * (c.a[j] + adapter.b2.data[j]) + (1.0 - rho) * e[j];
}

void head_forward_cached(const ClassificationHead& head, ForwardCache& c) {
    if (head.mode == HeadMode::linear) {
        c.logits = matvec(head.anchors, c.a);
        return;
    }
    c.a_norm = std::sqrt(squared_norm(c.a));
    if (c.a_norm < 1e-300)
        throw std::domain_error("head: zero-norm adapter output in cosine mode");
    c.u.resize(c.a.size());
    for (std::size_t j = 0; j < c.a.size(); ++j) c.u[j] = c.a[j] / c.a_norm;
    c.logits = matvec(head.anchors, c.u);
    for (double& v : c.logits) v *= head.temperature;
}

/// dL/da from dL/dlogits.
std::vector<double> head_backward(const ClassificationHead& head, const ForwardCache& c,
                                  std::span<const double> g_logits) {
    if (head.mode == HeadMode::linear) return matvec_transposed(head.anchors, g_logits);
    std::vector<double> g_u = matvec_transposed(head.anchors, g_logits);
    for (double& v : g_u) v *= head.temperature;
    double proj = dot(c.u, g_u);
    std::vector<double> g_a(g_u.size());
    for (std::size_t j = 0; j < g_u.size(); ++j)
        g_a[j] = (g_u[j] - c.u[j] * proj) / c.a_norm;
    return g_a;
}

void adapter_backward(const Adapter& adapter, std::span<const double> e,
                      const ForwardCache& c, std::span<const double> g_a, double scale,
                      std::vector<Matrix>& grads) {
    if (adapter.kind == AdapterKind::linear) {
        add_outer(grads[0], g_a, e, scale);
        for (std::size_t j = 0; j < g_a.size(); ++j) grads[1].data[j] += scale * g_a[j];
        return;
    }
    const double rho = adapter.residual_weight;
    std::vector<double> g_inner(g_a.size());
    for (std::size_t j = 0; j < g_a.size(); ++j) g_inner[j] = rho * g_a[j];
    add_outer(grads[2], g_inner, c.h, scale);
    for (std::size_t j = 0; j < g_inner.size(); ++j)
        grads[3].data[j] += scale * g_inner[j];
    std::vector<double> g_h = matvec_transposed(adapter.w2, g_inner);
    for (std::size_t j = 0; j < g_h.size(); ++j)
        if (c.pre1[j] <= 0.0) g_h[j] = 0.0;
    add_outer(grads[0], g_h, e, scale);
    for (std::size_t j = 0; j < g_h.size(); ++j) grads[1].data[j] += scale * g_h[j];
}

double kl_given_probs(std::span<const double> p_teacher, std::span<const double> p_student) {
    double s = 0.0;
    for (std::size_t i = 0; i < p_teacher.size(); ++i) {
        if (p_teacher[i] <= 0.0) continue;  // lim p->0 of p log p = 0
        s += p_teacher[i] * (std::log(p_teacher[i]) - std::log(p_student[i]));
    }
    return s;
}

}  // namespace

std::vector<double> adapter_forward(const Adapter& adapter, std::span<const double> e) {
    ForwardCache c;
    adapter_forward_cached(adapter, e, c);
    return c.a;
}

std::vector<double> forward(const Adapter& adapter, const ClassificationHead& head,
                            std::span<const double> e) {
    ForwardCache c;
    adapter_forward_cached(adapter, e, c);
    head_forward_cached(head, c);
    return c.logits;
}

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
        throw ConfigError("train: learning_rate must be finite and >= 0");
    if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
    if (variance_window < 2) throw ConfigError("train: variance_window must be >= 2");
    if (kd_weight < 0.0) throw ConfigError("train: kd_weight must be >= 0");
    if (few_shot < 1) throw ConfigError("train: few_shot must be >= 1");
    if (grad_clip && *grad_clip <= 0.0)
        throw ConfigError("train: grad_clip must be positive when set");
}

LossBreakdown adapter_loss_and_grad(const Adapter& adapter, const ClassificationHead& head,
                                    const Matrix& x, const std::vector<int>& y,
                                    double kd_weight, const Adapter* kd_teacher,
                                    const Adapter* prox_ref, double prox_mu,
                                    std::vector<Matrix>* grads) {
    if (x.rows == 0) throw ConfigError("loss: empty batch");
    if (x.rows != y.size()) throw ConfigError("loss: labels do not match rows");

    if (grads) {
        grads->clear();
        for (const Matrix* p : adapter.params())
            grads->emplace_back(p->rows, p->cols);
    }

    LossBreakdown out;
    const double scale = 1.0 / static_cast<double>(x.rows);
    const bool use_kd = kd_weight > 0.0 && kd_teacher != nullptr;

    for (std::size_t i = 0; i < x.rows; ++i) {
        auto e = x.row(i);
        ForwardCache c;
        adapter_forward_cached(adapter, e, c);
        head_forward_cached(head, c);
        auto ce = softmax_cross_entropy(c.logits, y[i]);
        out.ce += scale * ce.loss;
        std::vector<double> g_logits = std::move(ce.grad);

        if (use_kd) {
            ForwardCache tc;
            adapter_forward_cached(*kd_teacher, e, tc);
            head_forward_cached(head, tc);
            std::vector<double> p_t = softmax(tc.logits);
            std::vector<double> p_s = softmax(c.logits);
            out.kd += scale * kl_given_probs(p_t, p_s);
            for (std::size_t k = 0; k < g_logits.size(); ++k)
                g_logits[k] += kd_weight * (p_s[k] - p_t[k]);
        }
        if (grads) {
            std::vector<double> g_a = head_backward(head, c, g_logits);
            adapter_backward(adapter, e, c, g_a, scale, *grads);
        }
    }

    if (prox_ref && prox_mu > 0.0) {
        auto ps = adapter.params();
        auto pr = prox_ref->params();
        for (std::size_t t = 0; t < ps.size(); ++t) {
            for (std::size_t j = 0; j < ps[t]->size(); ++j) {
                double d = ps[t]->data[j] - pr[t]->data[j];
                out.prox += 0.5 * prox_mu * d * d;
                if (grads) (*grads)[t].data[j] += prox_mu * d;
            }
        }
    }

    out.total = out.ce + kd_weight * out.kd + out.prox;
    return out;
}

namespace {

double window_variance(const std::vector<double>& v, int window) {
    double mean = 0.0;
    for (std::size_t i = v.size() - window; i < v.size(); ++i) mean += v[i];
    mean /= window;
    double var = 0.0;
    for (std::size_t i = v.size() - window; i < v.size(); ++i) {
        double d = v[i] - mean;
        var += d * d;
    }
    return var / window;
}

}  // namespace

TrainLog fit(Adapter& adapter, const ClassificationHead& head, const Matrix& x,
             const std::vector<int>& y, const TrainConfig& config,
             const Adapter* kd_teacher, const Adapter* prox_ref, double prox_mu,
             Rng* shuffle_rng) {
    config.validate();
    if (x.rows == 0) throw ConfigError("fit: empty training set");
    if (x.rows != y.size()) throw ConfigError("fit: labels do not match rows");

    const std::size_t n = x.rows;
    const std::size_t batch =
        config.batch_size == 0 ? n : std::min<std::size_t>(config.batch_size, n);
    const bool full_batch = batch == n;

    OptimizerState opt = config.optimizer == OptimizerKind::sgd
                             ? OptimizerState::sgd(config.learning_rate, config.grad_clip)
                             : OptimizerState::adam(config.learning_rate, config.grad_clip);

    Rng own_rng(derive_seed(config.seed, kStreamShuffle));
    Rng& rng = shuffle_rng ? *shuffle_rng : own_rng;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);

    TrainLog log;
    std::vector<Matrix> grads;
    auto params = adapter.params();
    std::vector<Matrix*> param_ptrs(params.begin(), params.end());

    for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
        if (!full_batch) rng.shuffle(order);

        double epoch_loss = 0.0, epoch_ce = 0.0, epoch_kd = 0.0, epoch_gsq = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < n; start += batch) {
            std::size_t len = std::min(batch, n - start);
            Matrix bx(len, x.cols);
            std::vector<int> by(len);
            for (std::size_t i = 0; i < len; ++i) {
                auto src = x.row(order[start + i]);
                std::copy(src.begin(), src.end(), bx.row(i).begin());
                by[i] = y[order[start + i]];
            }
            LossBreakdown lb = adapter_loss_and_grad(adapter, head, bx, by,
                                                     config.kd_weight, kd_teacher,
                                                     prox_ref, prox_mu, &grads);
            if (!std::isfinite(lb.total))
                throw std::runtime_error("training diverged at epoch " +
                                         std::to_string(epoch));
            double gsq = 0.0;
            for (const Matrix& g : grads) gsq += squared_norm(g.data);
            epoch_gsq += gsq;
            epoch_loss += lb.total;
            epoch_ce += lb.ce;
            epoch_kd += lb.kd;
            ++batches;

            std::vector<const Matrix*> grad_ptrs;
            grad_ptrs.reserve(grads.size());
            for (const Matrix& g : grads) grad_ptrs.push_back(&g);
            optimizer_step(opt, std::span<Matrix*>(param_ptrs),
                           std::span<const Matrix* const>(grad_ptrs));
            for (const Matrix* p : param_ptrs)
                for (double v : p->data)
                    if (!std::isfinite(v))
                        throw std::runtime_error("training diverged at epoch " +
                                                 std::to_string(epoch));
        }
        log.losses.push_back(epoch_loss / batches);
        log.ce_losses.push_back(epoch_ce / batches);
        log.kd_losses.push_back(epoch_kd / batches);
        log.grad_sq_norms.push_back(epoch_gsq / batches);
        log.epochs_used = epoch + 1;

        if (config.variance_threshold > 0.0 &&
            static_cast<int>(log.losses.size()) >= config.variance_window &&
            window_variance(log.losses, config.variance_window) <
                config.variance_threshold) {
            log.stopped_by_variance = true;
            break;
        }
    }

    log.final_loss = adapter_loss_and_grad(adapter, head, x, y, config.kd_weight,
                                           kd_teacher, prox_ref, prox_mu, nullptr)
                         .total;
    return log;
}

GlobalTrainResult train_global_adapter(const PrototypeDataset& dataset,
                                       const ClassificationHead& head,
                                       const Adapter& init, const TrainConfig& config) {
    if (dataset.prototypes.empty())
        throw ConfigError("train_global_adapter: empty prototype dataset");
    if (dataset.num_classes != head.num_classes())
        throw ConfigError("train_global_adapter: head class count mismatch");

    Matrix x(dataset.prototypes.size(), dataset.d_emb);
    std::vector<int> y(dataset.prototypes.size());
    for (std::size_t i = 0; i < dataset.prototypes.size(); ++i) {
        const Prototype& p = dataset.prototypes[i];
        if (p.class_id < 0 || p.class_id >= head.num_classes())
            throw ConfigError("train_global_adapter: prototype label out of range");
        std::copy(p.vec.begin(), p.vec.end(), x.row(i).begin());
        y[i] = p.class_id;
    }

    GlobalTrainResult res{init, {}};
    res.log = fit(res.adapter, head, x, y, config);
    return res;
}

double spectral_norm(const Matrix& m) {
    if (m.rows == 0 || m.cols == 0) return 0.0;
    const std::size_t d = m.cols;
    Matrix gram(d, d);
    for (std::size_t r = 0; r < m.rows; ++r) add_outer(gram, m.row(r), m.row(r), 1.0);

    std::vector<double> v(d, 1.0 / std::sqrt(static_cast<double>(d)));
    double lambda = 0.0;
    for (int iter = 0; iter < 1000; ++iter) {
        std::vector<double> w = matvec(gram, v);
        double norm = std::sqrt(squared_norm(w));
        if (norm < 1e-300) return 0.0;
        for (std::size_t j = 0; j < d; ++j) v[j] = w[j] / norm;
        if (std::abs(norm - lambda) <= 1e-13 * std::max(1.0, norm)) {
            lambda = norm;
            break;
        }
        lambda = norm;
    }
    return std::sqrt(lambda);
}

double lipschitz_bound(const PrototypeDataset& dataset, const ClassificationHead& head,
                       AdapterKind kind) {
    if (kind != AdapterKind::linear)
        throw ConfigError("lipschitz_bound: only the linear adapter is supported");
    if (head.mode != HeadMode::linear)
        throw ConfigError("lipschitz_bound: only the linear head is supported");
    if (dataset.prototypes.empty()) return 0.0;

    double max_sq = 0.0;
    for (const Prototype& p : dataset.prototypes)
        max_sq = std::max(max_sq, squared_norm(p.vec));
    double sigma = spectral_norm(head.anchors);
    return 0.5 * sigma * sigma * max_sq;
}

EmbeddedSplit few_shot_select(const EmbeddedSplit& data, int num_classes, int few_shot,
                              std::uint64_t seed) {
    if (few_shot < 1) throw ConfigError("few_shot_select: F must be >= 1");
    std::vector<std::size_t> chosen;
    for (int k = 0; k < num_classes; ++k) {
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < data.labels.size(); ++i)
            if (data.labels[i] == k) rows.push_back(i);
        if (rows.empty()) continue;
        Rng rng(derive_seed(seed, kStreamFewShot, static_cast<std::uint64_t>(k)));
        rng.shuffle(rows);
        std::size_t take = std::min<std::size_t>(rows.size(), few_shot);
        chosen.insert(chosen.end(), rows.begin(), rows.begin() + take);
    }
    std::sort(chosen.begin(), chosen.end());

    EmbeddedSplit out;
    out.embeddings = Matrix(chosen.size(), data.embeddings.cols);
    out.labels.reserve(chosen.size());
    for (std::size_t i = 0; i < chosen.size(); ++i) {
        auto src = data.embeddings.row(chosen[i]);
        std::copy(src.begin(), src.end(), out.embeddings.row(i).begin());
        out.labels.push_back(data.labels[chosen[i]]);
        if (!data.origin_domains.empty())
            out.origin_domains.push_back(data.origin_domains[chosen[i]]);
    }
    return out;
}

double kd_loss(const Matrix& global_logits, const Matrix& local_logits) {
    if (!global_logits.same_shape(local_logits))
        throw ConfigError("kd_loss: shape mismatch");
    if (global_logits.rows == 0) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < global_logits.rows; ++i) {
        std::vector<double> p_t = softmax(global_logits.row(i));
        std::vector<double> p_s = softmax(local_logits.row(i));
        s += kl_given_probs(p_t, p_s);
    }
    return s / static_cast<double>(global_logits.rows);
}

LocalAdaptResult local_adapt(const Adapter& global, const ClassificationHead& head,
                             const Matrix& x, const std::vector<int>& y,
                             const TrainConfig& config) {
    if (x.rows == 0) throw ConfigError("local_adapt: empty few-shot set");
    LocalAdaptResult res{global, {}};
    res.log = fit(res.adapter, head, x, y, config, &global);
    return res;
}

EvalResult evaluate(const Adapter& adapter, const ClassificationHead& head,
                    const Matrix& x, const std::vector<int>& y) {
    if (x.rows != y.size()) throw ConfigError("evaluate: labels do not match rows");
    EvalResult out;
    out.count = x.rows;
    if (x.rows == 0) return out;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < x.rows; ++i) {
        std::vector<double> logits = forward(adapter, head, x.row(i));
        out.loss += softmax_cross_entropy(logits, y[i]).loss;
        std::size_t best = 0;
        for (std::size_t k = 1; k < logits.size(); ++k)
            if (logits[k] > logits[best]) best = k;
        if (static_cast<int>(best) == y[i]) ++correct;
    }
    out.loss /= static_cast<double>(x.rows);
    out.accuracy = static_cast<double>(correct) / static_cast<double>(x.rows);
    return out;
}

namespace {

void put_u32le(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

struct AdpReader {
    const std::string& bytes;
    std::size_t pos = 0;

    [[noreturn]] void fail(const std::string& what) const {
        throw ParseError("MPFTADP1 parse error at byte " + std::to_string(pos) + ": " +
                         what);
    }
    std::uint32_t u32(const char* field) {
        if (pos + 4 > bytes.size())
            fail(std::string("truncated while reading ") + field);
        const auto* b = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
        std::uint32_t v = static_cast<std::uint32_t>(b[0]) |
                          (static_cast<std::uint32_t>(b[1]) << 8) |
                          (static_cast<std::uint32_t>(b[2]) << 16) |
                          (static_cast<std::uint32_t>(b[3]) << 24);
        pos += 4;
        return v;
    }
    float f32(const char* field) { return std::bit_cast<float>(u32(field)); }
};

}  // namespace

std::string serialize_adapter(const Adapter& adapter) {
    std::string out;
    out.append(kAdpMagic, sizeof(kAdpMagic));
    put_u32le(out, adapter.kind == AdapterKind::linear ? 0u : 1u);
    put_u32le(out, static_cast<std::uint32_t>(adapter.d_emb));
    put_u32le(out, static_cast<std::uint32_t>(adapter.hidden));
    put_u32le(out, std::bit_cast<std::uint32_t>(
                       static_cast<float>(adapter.residual_weight)));
    put_u32le(out, static_cast<std::uint32_t>(adapter.param_count()));
    for (const Matrix* m : adapter.params())
        for (double v : m->data)
            put_u32le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    return out;
}

Adapter deserialize_adapter(const std::string& bytes) {
    AdpReader r{bytes};
    if (bytes.size() < 8) r.fail("missing header");
    if (std::memcmp(bytes.data(), kAdpMagic, 8) != 0) r.fail("bad magic");
    r.pos = 8;
    std::uint32_t kind = r.u32("kind");
    if (kind > 1) r.fail("unknown adapter kind");
    std::uint32_t d_emb = r.u32("d_emb");
    if (d_emb == 0) r.fail("d_emb must be positive");
    std::uint32_t hidden = r.u32("hidden");
    float rho = r.f32("residual_weight");
    std::uint32_t count = r.u32("param_count");

    Adapter a;
    a.d_emb = d_emb;
    if (kind == 0) {
        a.kind = AdapterKind::linear;
        a.w = Matrix(d_emb, d_emb);
        a.b = Matrix(d_emb, 1);
    } else {
        if (hidden == 0) r.fail("bottleneck requires hidden > 0");
        if (!(rho >= 0.0f && rho <= 1.0f)) r.fail("residual_weight out of range");
        a.kind = AdapterKind::bottleneck;
        a.hidden = hidden;
        a.residual_weight = rho;
        a.w1 = Matrix(hidden, d_emb);
        a.b1 = Matrix(hidden, 1);
        a.w2 = Matrix(d_emb, hidden);
        a.b2 = Matrix(d_emb, 1);
    }
    if (count != a.param_count()) r.fail("param_count does not match shapes");
    for (Matrix* m : a.params())
        for (double& v : m->data) v = static_cast<double>(r.f32("parameter"));
    if (r.pos != bytes.size()) r.fail("trailing bytes after parameters");
    return a;
}

void write_adapter_file(const Adapter& adapter, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    std::string bytes = serialize_adapter(adapter);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + path);
}

Adapter read_adapter_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    return deserialize_adapter(bytes);
}

std::uint64_t adapter_payload_bytes(const Adapter& adapter) {
    return 28 + 4ull * adapter.param_count();
}

}  // namespace mpft
