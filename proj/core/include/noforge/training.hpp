#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "noforge/csv.hpp"
#include "noforge/data.hpp"
#include "noforge/layers.hpp"
#include "noforge/models.hpp"
#include "noforge/rng.hpp"

namespace noforge {

// ---------------------------------------------------------------------------
// Masked MSE
//
// loss = sum(mask * (pred - target)^2) / (mask-on voxel-component count);
// the per-voxel mask zeroes both the residual and the gradient, so values
// outside the mask can never influence the optimization.

template <typename T>
double masked_mse(const TensorT<T>& pred, const TensorT<T>& target, const TensorT<T>& mask,
                  TensorT<T>* grad_pred = nullptr) {
    if (!pred.same_shape(target)) throw ShapeMismatch("masked_mse pred/target shapes differ");
    if (mask.rank() != pred.rank() || mask.shape[0] != 1 ||
        !std::equal(pred.shape.begin() + 1, pred.shape.end(), mask.shape.begin() + 1))
        throw ShapeMismatch("masked_mse mask must be [1, spatial...] matching pred");
    const std::int64_t channels = pred.shape[0];
    const std::int64_t per_channel = mask.size();
    std::int64_t on = 0;
    for (std::int64_t i = 0; i < per_channel; ++i) {
        const T m = mask[i];
        if (m != T(0) && m != T(1)) throw InvalidInput("masked_mse mask must be binary");
        if (m != T(0)) ++on;
    }
    if (on == 0) throw EmptyMask("masked_mse over an all-zero mask is undefined");
    const double count = static_cast<double>(on * channels);
    if (grad_pred) *grad_pred = TensorT<T>(pred.shape);
    double acc = 0.0;
    for (std::int64_t c = 0; c < channels; ++c)
        for (std::int64_t i = 0; i < per_channel; ++i) {
            if (mask[i] == T(0)) continue;
            const double r = static_cast<double>(pred[c * per_channel + i]) -
                             static_cast<double>(target[c * per_channel + i]);
            acc += r * r;
            if (grad_pred) (*grad_pred)[c * per_channel + i] = static_cast<T>(2.0 * r / count);
        }
    return acc / count;
}

// ---------------------------------------------------------------------------
// AdamW

template <typename T>
struct OptimState {
    std::vector<TensorT<T>> m; // first moments, one per trainable parameter
    std::vector<TensorT<T>> v; // second moments
    std::int64_t step = 0;
};

template <typename T>
OptimState<T> make_optim_state(const ParamStore<T>& params) {
    OptimState<T> s;
    for (const auto& p : params.items()) {
        if (!p->trainable) continue;
        s.m.emplace_back(p->value.shape);
        s.v.emplace_back(p->value.shape);
    }
    return s;
}

// One AdamW step over every trainable parameter. With g the gradient and t
// the incremented step counter:
//   theta <- theta - lr*wd*theta                  (decoupled weight decay)
//   m <- b1*m + (1-b1)*g ;  v <- b2*v + (1-b2)*g^2
//   mhat = m/(1-b1^t)     ;  vhat = v/(1-b2^t)
//   theta <- theta - lr * mhat / (sqrt(vhat) + eps)
template <typename T>
void adamw_step(ParamStore<T>& params, OptimState<T>& state, double lr, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8, double weight_decay = 1e-5) {
    std::size_t slot = 0;
    state.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    for (const auto& p : params.items()) {
        if (!p->trainable) continue;
        auto& m = state.m[slot];
        auto& v = state.v[slot];
        ++slot;
        for (std::int64_t i = 0; i < p->value.size(); ++i) {
            const double g = p->grad[i];
            if (!std::isfinite(g))
                throw NonFiniteGradient("non-finite gradient in parameter " + p->name);
            double theta = p->value[i];
            theta -= lr * weight_decay * theta;
            const double mi = beta1 * m[i] + (1.0 - beta1) * g;
            const double vi = beta2 * v[i] + (1.0 - beta2) * g * g;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            theta -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps);
            p->value[i] = static_cast<T>(theta);
        }
    }
}

// Optional global-norm gradient clipping (off when max_norm <= 0).
template <typename T>
void clip_grad_norm(ParamStore<T>& params, double max_norm) {
    if (max_norm <= 0.0) return;
    double sq = 0.0;
    for (const auto& p : params.items()) {
        if (!p->trainable) continue;
        for (std::int64_t i = 0; i < p->grad.size(); ++i)
            sq += static_cast<double>(p->grad[i]) * p->grad[i];
    }
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    const T s = static_cast<T>(max_norm / norm);
    for (const auto& p : params.items()) {
        if (!p->trainable) continue;
        for (std::int64_t i = 0; i < p->grad.size(); ++i) p->grad[i] *= s;
    }
}

// ---------------------------------------------------------------------------
// Plateau scheduler: halve the learning rate on the patience-th consecutive
// non-improving validation epoch. Improvement means strictly lower than the
// best by at least 1e-12.

class PlateauScheduler {
public:
    PlateauScheduler(double initial_lr, double factor = 0.5, std::int64_t patience = 10,
                     double min_lr = 0.0)
        : lr_(initial_lr), factor_(factor), patience_(patience), min_lr_(min_lr) {}

    double observe(double val_loss) {
        if (!std::isfinite(val_loss)) throw NonFiniteGradient("non-finite validation loss");
        if (best_ - val_loss >= 1e-12) {
            best_ = val_loss;
            bad_epochs_ = 0;
        } else {
            ++bad_epochs_;
            if (bad_epochs_ >= patience_) {
                lr_ = std::max(lr_ * factor_, min_lr_);
                bad_epochs_ = 0;
            }
        }
        return lr_;
    }

    double lr() const { return lr_; }
    double best() const { return best_; }

private:
    double lr_;
    double factor_;
    std::int64_t patience_;
    double min_lr_;
    double best_ = std::numeric_limits<double>::infinity();
    std::int64_t bad_epochs_ = 0;
};

// ---------------------------------------------------------------------------
// Metrics

struct MetricsRow {
    double mae = 0.0, mse = 0.0, rmse = 0.0, accuracy = 0.0;
    std::string split;
    std::string target;
    std::int64_t epoch = -1;
};

// Accumulates masked voxel-component errors across samples. Accuracy is the
// relative-L1 fidelity 1 - sum|y - yhat| / sum|y|, clamped to [0, 1], and is
// reported in all outputs as "accuracy (rel-L1)".
class MetricsAccumulator {
public:
    template <typename T>
    void add(const TensorT<T>& pred, const TensorT<T>& target, const TensorT<T>& mask) {
        const std::int64_t channels = pred.shape[0];
        const std::int64_t per_channel = mask.size();
        if (!pred.same_shape(target) || pred.size() != channels * per_channel)
            throw ShapeMismatch("metrics shapes inconsistent");
        for (std::int64_t c = 0; c < channels; ++c)
            for (std::int64_t i = 0; i < per_channel; ++i) {
                if (mask[i] == T(0)) continue;
                const double y = target[c * per_channel + i];
                const double e = static_cast<double>(pred[c * per_channel + i]) - y;
                abs_err_ += std::abs(e);
                sq_err_ += e * e;
                abs_y_ += std::abs(y);
                ++count_;
            }
    }

    MetricsRow finalize(std::string split, std::string target, std::int64_t epoch = -1) const {
        if (count_ == 0) throw EmptyMask("metrics over an empty mask");
        MetricsRow row;
        row.mae = abs_err_ / static_cast<double>(count_);
        row.mse = sq_err_ / static_cast<double>(count_);
        row.rmse = std::sqrt(row.mse);
        row.accuracy = abs_y_ > 0.0 ? std::clamp(1.0 - abs_err_ / abs_y_, 0.0, 1.0)
                                    : (abs_err_ == 0.0 ? 1.0 : 0.0);
        row.split = std::move(split);
        row.target = std::move(target);
        row.epoch = epoch;
        return row;
    }

private:
    double abs_err_ = 0.0, sq_err_ = 0.0, abs_y_ = 0.0;
    std::int64_t count_ = 0;
};

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
    std::int64_t epochs = 300;
    std::int64_t batch = 4;
    std::uint64_t seed = 0;
    TargetField target = TargetField::Real;
    double lr = 1e-3;
    double weight_decay = 1e-5;
    double plateau_factor = 0.5;
    std::int64_t plateau_patience = 10;
    double min_lr = 0.0;
    double grad_clip = 0.0; // 0 disables clipping
    std::string out_dir;    // when set: history.csv + checkpoint.nof live here
};

struct HistoryRow {
    std::int64_t epoch;
    double train_loss, val_loss, lr;
};

struct TrainResult {
    std::vector<HistoryRow> history;
    double best_val = std::numeric_limits<double>::infinity();
    std::int64_t best_epoch = -1;
    std::string checkpoint_path;
};

namespace detail {

// Epoch/scheduler/checkpoint plumbing shared by the grid and DeepONet paths.
// run_batch consumes one shuffled index batch at the given lr and returns the
// summed per-sample loss; eval_loss computes the full validation loss in eval
// mode; save writes the current parameters to a checkpoint path.
struct TrainHooks {
    std::function<double(std::span<const std::int64_t>, double lr)> run_batch;
    std::function<double()> eval_loss;
    std::function<void(const std::string&)> save;
};

inline TrainResult run_training(const TrainHooks& hooks, std::int64_t n_train,
                                const TrainConfig& cfg) {
    if (n_train < 1) throw InvalidConfig("training split is empty");
    TrainResult result;
    std::ofstream history_file;
    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        result.checkpoint_path = cfg.out_dir + "/checkpoint.nof";
        history_file.open(cfg.out_dir + "/history.csv", std::ios::trunc);
        if (!history_file) throw IOFailure("cannot open history.csv in " + cfg.out_dir);
        history_file << "epoch,train_loss,val_loss,lr\n";
        history_file.flush();
    }
    // epochs == 0: the checkpoint is the initialization, history stays empty.
    if (cfg.epochs == 0) {
        if (!result.checkpoint_path.empty()) hooks.save(result.checkpoint_path);
        return result;
    }

    PlateauScheduler scheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr);
    std::vector<std::int64_t> order(static_cast<std::size_t>(n_train));
    for (std::int64_t i = 0; i < n_train; ++i) order[static_cast<std::size_t>(i)] = i;

    for (std::int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng shuffle_rng(cfg.seed, 0x9e3779b9u + static_cast<std::uint64_t>(epoch));
        shuffle(order, shuffle_rng);
        const double lr = scheduler.lr();
        double loss_sum = 0.0;
        for (std::int64_t start = 0; start < n_train; start += cfg.batch) {
            const std::int64_t len = std::min(cfg.batch, n_train - start);
            loss_sum += hooks.run_batch(
                std::span<const std::int64_t>(order.data() + start, static_cast<std::size_t>(len)), lr);
        }
        const double train_loss = loss_sum / static_cast<double>(n_train);
        const double val_loss = hooks.eval_loss();
        result.history.push_back({epoch, train_loss, val_loss, lr});
        if (history_file.is_open()) {
            history_file << epoch << ',' << fmt_g9(train_loss) << ',' << fmt_g9(val_loss) << ','
                         << fmt_g9(lr) << '\n';
            history_file.flush();
        }
        if (val_loss < result.best_val) {
            result.best_val = val_loss;
            result.best_epoch = epoch;
            if (!result.checkpoint_path.empty()) hooks.save(result.checkpoint_path);
        }
        scheduler.observe(val_loss);
    }
    // A run that never improved still leaves a usable checkpoint behind.
    if (!result.checkpoint_path.empty() && result.best_epoch < 0)
        hooks.save(result.checkpoint_path);
    return result;
}

} // namespace detail

// Train a grid operator (FNO / F-FNO / MG-FNO) on prepared samples.
template <typename M, typename T = float>
TrainResult train_grid_model(M& model, const std::vector<PreparedSampleT<T>>& train_set,
                             const std::vector<PreparedSampleT<T>>& val_set, const TrainConfig& cfg) {
    if (val_set.empty()) throw InvalidConfig("validation split is empty");
    OptimState<T> optim = make_optim_state(model.params());
    Rng dropout_rng(cfg.seed, 0xd09f00d5ULL);

    detail::TrainHooks hooks;
    hooks.run_batch = [&](std::span<const std::int64_t> idxs, double lr) {
        model.params().zero_grad();
        double loss_sum = 0.0;
        const T inv_b = T(1) / static_cast<T>(idxs.size());
        for (const std::int64_t i : idxs) {
            const auto& s = train_set[static_cast<std::size_t>(i)];
            typename M::Cache cache;
            const TensorT<T> pred = model.forward(s.input, &cache, /*training=*/true, &dropout_rng);
            TensorT<T> grad;
            loss_sum += masked_mse(pred, s.target, s.mask, &grad);
            for (std::int64_t j = 0; j < grad.size(); ++j) grad[j] *= inv_b;
            model.backward(grad, cache);
        }
        clip_grad_norm(model.params(), cfg.grad_clip);
        adamw_step(model.params(), optim, lr, 0.9, 0.999, 1e-8, cfg.weight_decay);
        return loss_sum;
    };
    hooks.eval_loss = [&] {
        double acc = 0.0;
        for (const auto& s : val_set)
            acc += masked_mse(model.forward(s.input, nullptr, /*training=*/false, nullptr), s.target,
                              s.mask);
        return acc / static_cast<double>(val_set.size());
    };
    hooks.save = [&](const std::string& path) { save_model<M, T>(model, path); };
    return detail::run_training(hooks, static_cast<std::int64_t>(train_set.size()), cfg);
}

// DeepONet batch views: all samples must share one mask so the trunk runs
// once per batch over a common coordinate set.
template <typename T>
struct DeepOnetBatchData {
    TensorT<T> coords;                   // [Q,3]
    std::vector<std::int64_t> offsets;   // per-channel voxel offsets of coords
    std::vector<TensorT<T>> images;      // per sample [D,W,H]
    std::vector<TensorT<T>> coord_targets; // per sample [Q,3]
};

template <typename T>
DeepOnetBatchData<T> prepare_deeponet_data(const std::vector<PreparedSampleT<T>>& samples) {
    if (samples.empty()) throw InvalidConfig("empty sample set");
    DeepOnetBatchData<T> data;
    masked_coords(samples[0].mask, data.coords, data.offsets);
    const std::int64_t q = data.coords.shape[0];
    const std::int64_t per_channel = samples[0].mask.size();
    for (const auto& s : samples) {
        if (s.mask.data != samples[0].mask.data)
            throw InvalidConfig("deeponet batching requires a shared mask across samples");
        data.images.push_back(axial_slice_image(s.t1));
        TensorT<T> rows({q, 3});
        for (std::int64_t r = 0; r < q; ++r)
            for (std::int64_t c = 0; c < 3; ++c)
                rows[r * 3 + c] = s.target[c * per_channel + data.offsets[static_cast<std::size_t>(r)]];
        data.coord_targets.push_back(std::move(rows));
    }
    return data;
}

template <typename T = float>
TrainResult train_deeponet(DeepOnet<T>& model, const std::vector<PreparedSampleT<T>>& train_set,
                           const std::vector<PreparedSampleT<T>>& val_set, const TrainConfig& cfg) {
    if (val_set.empty()) throw InvalidConfig("validation split is empty");
    if (cfg.batch < 2) throw InvalidConfig("deeponet training needs batch >= 2 for batchnorm");
    const DeepOnetBatchData<T> train_data = prepare_deeponet_data(train_set);
    const DeepOnetBatchData<T> val_data = prepare_deeponet_data(val_set);
    OptimState<T> optim = make_optim_state(model.params());
    Rng dropout_rng(cfg.seed, 0xd09f00d5ULL);
    const std::int64_t q = train_data.coords.shape[0];
    const auto& img0 = train_data.images[0];

    auto stack_batch = [&](const DeepOnetBatchData<T>& data, std::span<const std::int64_t> idxs,
                           const std::vector<PreparedSampleT<T>>& samples, TensorT<T>& images,
                           TensorT<T>& scalars) {
        const std::int64_t b = static_cast<std::int64_t>(idxs.size());
        images = TensorT<T>({b, img0.shape[0], img0.shape[1], img0.shape[2]});
        scalars = TensorT<T>({b, 5});
        for (std::int64_t k = 0; k < b; ++k) {
            const auto& img = data.images[static_cast<std::size_t>(idxs[static_cast<std::size_t>(k)])];
            std::copy(img.data.begin(), img.data.end(), images.data.begin() + k * img.size());
            const auto& sc = samples[static_cast<std::size_t>(idxs[static_cast<std::size_t>(k)])].scalars;
            for (int j = 0; j < 5; ++j) scalars[k * 5 + j] = sc[static_cast<std::size_t>(j)];
        }
    };

    detail::TrainHooks hooks;
    hooks.run_batch = [&](std::span<const std::int64_t> idxs, double lr) {
        // BatchNorm needs at least two samples; a trailing singleton batch is
        // padded by repeating its sample (gradients averaged as usual).
        std::vector<std::int64_t> use(idxs.begin(), idxs.end());
        if (use.size() == 1) use.push_back(use[0]);
        model.params().zero_grad();
        TensorT<T> images, scalars;
        stack_batch(train_data, use, train_set, images, scalars);
        typename DeepOnet<T>::Cache cache;
        const TensorT<T> out =
            model.forward_batch(images, scalars, train_data.coords, /*training=*/true, &dropout_rng, &cache);
        const std::int64_t b = static_cast<std::int64_t>(use.size());
        TensorT<T> grad(out.shape);
        double loss_sum = 0.0;
        const double denom = static_cast<double>(3 * q);
        for (std::int64_t k = 0; k < b; ++k) {
            const auto& tgt = train_data.coord_targets[static_cast<std::size_t>(use[static_cast<std::size_t>(k)])];
            double acc = 0.0;
            for (std::int64_t j = 0; j < 3 * q; ++j) {
                const double r = static_cast<double>(out[k * 3 * q + j]) - tgt[j];
                acc += r * r;
                grad[k * 3 * q + j] = static_cast<T>(2.0 * r / (denom * static_cast<double>(b)));
            }
            loss_sum += acc / denom;
        }
        model.backward_batch(grad, cache);
        clip_grad_norm(model.params(), cfg.grad_clip);
        adamw_step(model.params(), optim, lr, 0.9, 0.999, 1e-8, cfg.weight_decay);
        // Report the true per-sample sum for the originally requested batch.
        return loss_sum * static_cast<double>(idxs.size()) / static_cast<double>(b);
    };
    hooks.eval_loss = [&] {
        std::vector<std::int64_t> all(val_set.size());
        for (std::size_t i = 0; i < val_set.size(); ++i) all[i] = static_cast<std::int64_t>(i);
        TensorT<T> images, scalars;
        stack_batch(val_data, all, val_set, images, scalars);
        const TensorT<T> out =
            model.forward_batch(images, scalars, val_data.coords, /*training=*/false, nullptr, nullptr);
        const std::int64_t qv = val_data.coords.shape[0];
        double acc = 0.0;
        for (std::size_t k = 0; k < val_set.size(); ++k) {
            const auto& tgt = val_data.coord_targets[k];
            double s = 0.0;
            for (std::int64_t j = 0; j < 3 * qv; ++j) {
                const double r = static_cast<double>(out[static_cast<std::int64_t>(k) * 3 * qv + j]) - tgt[j];
                s += r * r;
            }
            acc += s / static_cast<double>(3 * qv);
        }
        return acc / static_cast<double>(val_set.size());
    };
    hooks.save = [&](const std::string& path) { save_model<DeepOnet<T>, T>(model, path); };
    return detail::run_training(hooks, static_cast<std::int64_t>(train_set.size()), cfg);
}

// ---------------------------------------------------------------------------
// Field prediction (eval mode) for each model family.

template <typename M, typename T = float>
TensorT<T> predict_field(M& model, const PreparedSampleT<T>& s) {
    return model.forward(s.input, nullptr, /*training=*/false, nullptr);
}

template <typename T>
TensorT<T> predict_field(DeepOnet<T>& model, const PreparedSampleT<T>& s) {
    TensorT<T> coords;
    std::vector<std::int64_t> offsets;
    masked_coords(s.mask, coords, offsets);
    const TensorT<T> rows = model.forward(s.t1, s.scalars, coords);
    TensorT<T> field(s.target.shape);
    const std::int64_t per_channel = s.mask.size();
    for (std::size_t r = 0; r < offsets.size(); ++r)
        for (std::int64_t c = 0; c < 3; ++c)
            field[c * per_channel + offsets[r]] = rows[static_cast<std::int64_t>(r) * 3 + c];
    return field;
}

template <typename T>
TensorT<T> predict_field_any(AnyModelVariant<T>& model, const PreparedSampleT<T>& s) {
    return std::visit([&](auto& m) { return predict_field(m, s); }, model);
}

// Metrics for a predictor over a list of prepared samples (scaled space).
template <typename T>
MetricsRow evaluate_split(const std::function<TensorT<T>(const PreparedSampleT<T>&)>& predict,
                          const std::vector<PreparedSampleT<T>>& samples, const std::string& split,
                          const std::string& target, std::int64_t epoch = -1) {
    MetricsAccumulator acc;
    for (const auto& s : samples) acc.add(predict(s), s.target, s.mask);
    return acc.finalize(split, target, epoch);
}

// ---------------------------------------------------------------------------
// Throughput measurement: wall-clock forward iterations per second after a
// warmup, reported as mean and standard deviation over the timed iterations.

struct ThroughputResult {
    double iters_per_second_mean = 0.0;
    double iters_per_second_std = 0.0;
    std::int64_t param_count = 0;
};

inline ThroughputResult throughput_benchmark(const std::function<void()>& run_once,
                                             std::int64_t warmup, std::int64_t iters,
                                             std::int64_t param_count) {
    if (iters < 10) throw InvalidConfig("throughput benchmark needs iters >= 10");
    for (std::int64_t i = 0; i < warmup; ++i) run_once();
    std::vector<double> rates;
    rates.reserve(static_cast<std::size_t>(iters));
    for (std::int64_t i = 0; i < iters; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        run_once();
        const auto t1 = std::chrono::steady_clock::now();
        const double dt = std::chrono::duration<double>(t1 - t0).count();
        rates.push_back(dt > 0.0 ? 1.0 / dt : std::numeric_limits<double>::infinity());
    }
    double mean = 0.0;
    for (const double r : rates) mean += r;
    mean /= static_cast<double>(rates.size());
    double var = 0.0;
    for (const double r : rates) var += (r - mean) * (r - mean);
    var /= static_cast<double>(rates.size());
    ThroughputResult out;
    out.iters_per_second_mean = mean;
    out.iters_per_second_std = std::sqrt(var);
    out.param_count = param_count;
    return out;
}

} // namespace noforge
