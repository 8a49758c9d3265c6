#include "owps/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <cstring>
#include <memory>
#include <random>

#include <json.hpp>

#include "owps/error.hpp"
#include "owps/losses.hpp"
#include "owps/ops.hpp"

namespace owps::train {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};

std::unique_ptr<std::FILE, FileCloser> open_for_write(const std::filesystem::path& path) {
    std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "wb"));
    if (!f) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
    return f;
}

void check_written(std::FILE* f, const std::filesystem::path& path) {
    if (std::fflush(f) != 0 || std::ferror(f)) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

Tensor labels_to_tensor(const std::vector<const BinaryMask*>& masks) {
    const auto n = static_cast<std::int64_t>(masks.size());
    const int h = masks.front()->height, w = masks.front()->width;
    std::vector<float> values;
    values.reserve(static_cast<std::size_t>(n * h * w));
    for (const auto* m : masks) {
        for (auto v : m->data) values.push_back(v ? 1.0f : 0.0f);
    }
    return Tensor::from_data({n, 1, h, w}, std::move(values));
}

ProbMap plane(const Tensor& t, int h, int w) {
    ProbMap map(h, w);
    std::copy(t.data().begin(), t.data().begin() + static_cast<std::ptrdiff_t>(h * w), map.data.begin());
    return map;
}

}  // namespace

// --- optimizer ---------------------------------------------------------------

void adam_step(net::ParamStore& params, AdamState& state, double lr) {
    auto& entries = params.entries();
    std::size_t trainable = 0;
    for (const auto& e : entries) {
        if (!e.trainable) continue;
        if (!e.tensor.has_grad()) throw Error(ErrorKind::State, "missing gradient for parameter " + e.name);
        ++trainable;
    }
    if (state.m.empty()) {
        for (const auto& e : entries) {
            if (!e.trainable) continue;
            state.m.emplace_back(e.tensor.numel(), 0.0);
            state.v.emplace_back(e.tensor.numel(), 0.0);
        }
    }
    if (state.m.size() != trainable) throw Error(ErrorKind::State, "optimizer state does not match the parameter set");
    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    std::size_t k = 0;
    for (auto& e : entries) {
        if (!e.trainable) continue;
        auto& m = state.m[k];
        auto& v = state.v[k];
        ++k;
        if (m.size() != e.tensor.numel()) throw Error(ErrorKind::State, "optimizer state shape differs for " + e.name);
        auto value = e.tensor.mutable_data();
        const auto grad = e.tensor.grad();
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double g = grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            const double update = lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + state.eps);
            value[i] = static_cast<float>(value[i] - update);
        }
    }
}

// --- metrics -----------------------------------------------------------------

double dice_coefficient(const BinaryMask& pred, const BinaryMask& label) {
    if (pred.height != label.height || pred.width != label.width) {
        throw Error(ErrorKind::ShapeMismatch, "dice: prediction and label extents differ");
    }
    std::int64_t both = 0, p = 0, t = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        both += pred.data[i] & label.data[i];
        p += pred.data[i];
        t += label.data[i];
    }
    constexpr double eps = 1e-6;
    return (2.0 * static_cast<double>(both) + eps) / (static_cast<double>(p + t) + eps);
}

double dice_per_case(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& labels) {
    if (preds.empty()) throw Error(ErrorKind::Domain, "dice_per_case of an empty list");
    if (preds.size() != labels.size()) throw Error(ErrorKind::ShapeMismatch, "dice_per_case: list lengths differ");
    double sum = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) sum += dice_coefficient(preds[i], labels[i]);
    return sum / static_cast<double>(preds.size());
}

// --- inference and evaluation -------------------------------------------------

Tensor images_to_tensor(const std::vector<const Image*>& images) {
    if (images.empty()) throw Error(ErrorKind::InvalidShape, "empty image batch");
    const int h = images.front()->height, w = images.front()->width;
    std::vector<float> values;
    values.reserve(static_cast<std::size_t>(images.size()) * 3 * static_cast<std::size_t>(h * w));
    for (const auto* im : images) {
        if (im->height != h || im->width != w) throw Error(ErrorKind::ShapeMismatch, "images in a batch differ in size");
        values.insert(values.end(), im->data.begin(), im->data.end());
    }
    return Tensor::from_data({static_cast<std::int64_t>(images.size()), 3, h, w}, std::move(values));
}

Prediction predict(net::Model& model, const Image& image) {
    NoGradGuard guard;
    const auto out = net::forward(model, images_to_tensor({&image}), net::Mode::Eval);
    Prediction p;
    p.region = plane(out.region_prob, image.height, image.width);
    p.edge = out.edge_prob.defined() ? plane(out.edge_prob, image.height, image.width) : ProbMap(image.height, image.width);
    return p;
}

EvalReport evaluate_predictions(const std::vector<Prediction>& predictions, const std::vector<data::Sample>& samples,
                                const post::PostprocessConfig& cfg) {
    if (samples.empty()) throw Error(ErrorKind::Domain, "evaluation set is empty");
    if (predictions.size() != samples.size()) throw Error(ErrorKind::ShapeMismatch, "one prediction per sample required");
    EvalReport report;
    std::vector<BinaryMask> region_pred, edge_pred, region_lab, edge_lab;
    int correct = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto seg = post::segment_pipeline(predictions[i].region, predictions[i].edge, cfg);
        ImageEval e;
        e.boundary_dice = dice_coefficient(seg.edge_mask, samples[i].edge_mask);
        e.particle_dice = dice_coefficient(seg.region_mask, samples[i].region_mask);
        e.predicted_count = seg.count;
        e.true_count = samples[i].true_count;
        correct += e.predicted_count == e.true_count ? 1 : 0;
        report.per_image.push_back(e);
        edge_pred.push_back(seg.edge_mask);
        edge_lab.push_back(samples[i].edge_mask);
        region_pred.push_back(seg.region_mask);
        region_lab.push_back(samples[i].region_mask);
    }
    report.boundary_dice = dice_per_case(edge_pred, edge_lab);
    report.particle_dice = dice_per_case(region_pred, region_lab);
    report.count_accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
    return report;
}

EvalReport evaluate(net::Model& model, const std::vector<data::Sample>& samples, const post::PostprocessConfig& cfg) {
    std::vector<Prediction> predictions;
    predictions.reserve(samples.size());
    for (const auto& s : samples) predictions.push_back(predict(model, s.image));
    return evaluate_predictions(predictions, samples, cfg);
}

void write_eval_csv(const std::filesystem::path& path, const EvalReport& report) {
    auto f = open_for_write(path);
    std::fprintf(f.get(), "image,boundary_dice,particle_dice,predicted_count,true_count\n");
    for (std::size_t i = 0; i < report.per_image.size(); ++i) {
        const auto& e = report.per_image[i];
        std::fprintf(f.get(), "%zu,%.6f,%.6f,%d,%d\n", i, e.boundary_dice, e.particle_dice, e.predicted_count, e.true_count);
    }
    std::fprintf(f.get(), "mean,%.6f,%.6f,%.6f,\n", report.boundary_dice, report.particle_dice, report.count_accuracy);
    check_written(f.get(), path);
}

// --- training ----------------------------------------------------------------

TrainResult train(const RunConfig& cfg, const std::vector<data::Sample>& train_set,
                  const std::vector<data::Sample>& eval_set, const ProgressFn& progress) {
    cfg.validate();
    if (train_set.empty()) throw Error(ErrorKind::Domain, "training set is empty");
    const auto& tc = cfg.train;
    if (static_cast<std::size_t>(tc.batch) > train_set.size()) {
        throw Error(ErrorKind::InvalidConfig, "train.batch exceeds the training set size");
    }
    const int stride = 1 << cfg.model.depth;
    for (const auto& s : train_set) {
        if (s.image.height % stride || s.image.width % stride) {
            throw Error(ErrorKind::InvalidShape, "training image extents must be divisible by " + std::to_string(stride));
        }
    }

    TrainResult result{net::build_model(cfg.model, splitmix(tc.seed ^ 0x11)), {}};
    net::Model& model = result.model;
    AdamState adam;
    std::mt19937_64 shuffle_rng(splitmix(tc.seed ^ 0x22));
    const std::uint64_t augment_base = splitmix(tc.seed ^ 0x33);
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t batches = train_set.size() / static_cast<std::size_t>(tc.batch);
    Tape& tape = Tape::current();

    for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) {
            std::uniform_int_distribution<std::size_t> pick(0, i - 1);
            std::swap(order[i - 1], order[pick(shuffle_rng)]);
        }
        double total = 0.0, region_total = 0.0, edge_total = 0.0;
        for (std::size_t b = 0; b < batches; ++b) {
            std::vector<data::Sample> batch;
            for (std::size_t j = 0; j < static_cast<std::size_t>(tc.batch); ++j) {
                const std::size_t idx = order[b * static_cast<std::size_t>(tc.batch) + j];
                if (tc.augment) {
                    const std::uint64_t s = splitmix(augment_base + static_cast<std::uint64_t>(epoch) * 0x100000000ULL + idx);
                    batch.push_back(data::augment(train_set[idx], s, tc.augmentation));
                } else {
                    batch.push_back(train_set[idx]);
                }
            }
            std::vector<const Image*> images;
            std::vector<const BinaryMask*> regions, edges;
            for (const auto& s : batch) {
                images.push_back(&s.image);
                regions.push_back(&s.region_mask);
                edges.push_back(&s.edge_mask);
            }
            tape.clear();
            const auto out = net::forward(model, images_to_tensor(images), net::Mode::Train);
            const auto& lc = cfg.loss;
            Tensor region_loss = losses::loss(lc.region_kind, out.region_prob, labels_to_tensor(regions), lc.gamma, lc.smooth_eps);
            Tensor loss = region_loss;
            double edge_value = 0.0;
            if (out.edge_prob.defined()) {
                Tensor edge_loss = losses::loss(lc.edge_kind, out.edge_prob, labels_to_tensor(edges), lc.gamma, lc.smooth_eps);
                edge_value = edge_loss.item();
                loss = losses::total_loss(region_loss, edge_loss);
            }
            const double value = loss.item();
            if (!std::isfinite(value)) {
                tape.clear();
                throw Error(ErrorKind::Diverged, "training loss is not finite at epoch " + std::to_string(epoch));
            }
            backward(loss);
            tape.clear();
            adam_step(model.params, adam, tc.lr);
            model.params.zero_grad();
            total += value;
            region_total += region_loss.item();
            edge_total += edge_value;
        }
        MetricsRow row;
        row.epoch = epoch;
        row.train_loss = total / static_cast<double>(batches);
        row.region_loss = region_total / static_cast<double>(batches);
        row.edge_loss = edge_total / static_cast<double>(batches);
        if (!eval_set.empty() && (epoch % tc.eval_every == 0 || epoch == tc.epochs)) {
            const auto report = evaluate(model, eval_set, cfg.postprocess);
            row.evaluated = true;
            row.boundary_dice = report.boundary_dice;
            row.particle_dice = report.particle_dice;
            row.count_accuracy = report.count_accuracy;
        }
        result.log.push_back(row);
        if (progress) progress(row);
    }
    return result;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& log) {
    auto f = open_for_write(path);
    std::fprintf(f.get(), "epoch,train_loss,region_loss,edge_loss,boundary_dice,particle_dice,count_acc\n");
    for (const auto& r : log) {
        std::fprintf(f.get(), "%d,%.8f,%.8f,%.8f", r.epoch, r.train_loss, r.region_loss, r.edge_loss);
        if (r.evaluated) {
            std::fprintf(f.get(), ",%.6f,%.6f,%.6f\n", r.boundary_dice, r.particle_dice, r.count_accuracy);
        } else {
            std::fprintf(f.get(), ",,,\n");
        }
    }
    check_written(f.get(), path);
}

// --- checkpoint ----------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'O', 'W', 'P', 'S'};
constexpr std::uint16_t kVersion = 1;
constexpr const char* kMetaName = "meta.model_config";

void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
}

void put_entry(std::string& out, const std::string& name, const Tensor& t) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (float v : t.data()) put_f32(out, v);
}

class Reader {
public:
    Reader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + static_cast<std::size_t>(i)])) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint16_t u16() {
        need(2);
        const auto v = static_cast<std::uint16_t>(static_cast<unsigned char>(bytes_[pos_]) |
                                                  (static_cast<unsigned char>(bytes_[pos_ + 1]) << 8));
        pos_ += 2;
        return v;
    }
    float f32() {
        const std::uint32_t bits = u32();
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }

    [[noreturn]] void corrupt(const std::string& why) const {
        throw Error(ErrorKind::Corrupt, "checkpoint " + path_ + ": " + why);
    }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) corrupt("truncated at byte " + std::to_string(pos_));
    }

    const std::string& bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

struct RawEntry {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

RawEntry read_entry(Reader& r) {
    RawEntry e;
    const std::uint32_t len = r.u32();
    if (len == 0 || len > 4096) r.corrupt("implausible name length " + std::to_string(len));
    e.name = r.str(len);
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) r.corrupt("implausible rank " + std::to_string(rank) + " for " + e.name);
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        const std::uint32_t extent = r.u32();
        if (extent == 0) r.corrupt("zero extent in " + e.name);
        count *= extent;
        if (count > (1ULL << 32)) r.corrupt("implausible size for " + e.name);
        e.shape.push_back(extent);
    }
    e.values.resize(static_cast<std::size_t>(count));
    for (auto& v : e.values) v = r.f32();
    return e;
}

std::vector<float> encode_config(const net::ModelConfig& c) {
    return {static_cast<float>(c.depth),
            static_cast<float>(c.base_channels),
            static_cast<float>(static_cast<int>(c.norm.variant)),
            c.norm.eps,
            c.norm.momentum,
            c.refine_enabled ? 1.0f : 0.0f,
            c.edge_branch ? 1.0f : 0.0f,
            static_cast<float>(c.input_channels)};
}

net::ModelConfig decode_config(const std::vector<float>& v, const Reader& r) {
    if (v.size() != 8) r.corrupt("model configuration entry has " + std::to_string(v.size()) + " values, expected 8");
    net::ModelConfig c;
    c.depth = static_cast<int>(v[0]);
    c.base_channels = static_cast<int>(v[1]);
    const int variant = static_cast<int>(v[2]);
    if (variant < 0 || variant > static_cast<int>(norm::Variant::BN_IN)) r.corrupt("unknown normalization code");
    c.norm.variant = static_cast<norm::Variant>(variant);
    c.norm.eps = v[3];
    c.norm.momentum = v[4];
    c.refine_enabled = v[5] != 0.0f;
    c.edge_branch = v[6] != 0.0f;
    c.input_channels = static_cast<int>(v[7]);
    try {
        c.validate();
    } catch (const Error& e) {
        r.corrupt(std::string("invalid model configuration: ") + e.what());
    }
    return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const net::Model& model) {
    std::string out(kMagic, 4);
    put_u16(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(model.params.entries().size() + 1));
    const auto meta = encode_config(model.cfg);
    put_entry(out, kMetaName, Tensor::from_data({static_cast<std::int64_t>(meta.size())}, meta));
    for (const auto& e : model.params.entries()) put_entry(out, e.name, e.tensor);
    auto f = open_for_write(path);
    if (std::fwrite(out.data(), 1, out.size(), f.get()) != out.size()) throw Error(ErrorKind::Io, "short write to " + path.string());
    check_written(f.get(), path);
}

net::Model load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, "cannot open checkpoint " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Reader r(bytes, path.string());
    if (bytes.size() < 4 || bytes.compare(0, 4, kMagic, 4) != 0) {
        throw Error(ErrorKind::Incompatible, path.string() + " is not a checkpoint (bad magic)");
    }
    r.str(4);
    const std::uint16_t version = r.u16();
    if (version != kVersion) {
        throw Error(ErrorKind::Incompatible, "checkpoint " + path.string() + " has version " + std::to_string(version) +
                                                 ", this build reads version " + std::to_string(kVersion));
    }
    const std::uint32_t count = r.u32();
    if (count < 1) r.corrupt("no entries");
    RawEntry meta = read_entry(r);
    if (meta.name != kMetaName) r.corrupt("first entry must be " + std::string(kMetaName));
    net::Model model = net::build_model(decode_config(meta.values, r), 0);
    auto& entries = model.params.entries();
    if (count - 1 != entries.size()) {
        r.corrupt("holds " + std::to_string(count - 1) + " tensors, the configured model has " + std::to_string(entries.size()));
    }
    for (auto& e : entries) {
        RawEntry raw = read_entry(r);
        if (raw.name != e.name) r.corrupt("expected entry " + e.name + ", found " + raw.name);
        if (raw.shape != e.tensor.shape()) {
            r.corrupt("entry " + e.name + " has shape " + shape_str(raw.shape) + ", expected " + shape_str(e.tensor.shape()));
        }
        std::copy(raw.values.begin(), raw.values.end(), e.tensor.mutable_data().begin());
    }
    if (!r.done()) r.corrupt("trailing bytes after the last entry");
    return model;
}

// --- experiment grid ---------------------------------------------------------------

std::vector<GridCell> GridSpec::cells() const {
    std::vector<GridCell> out;
    for (const auto& m : models) {
        for (const auto& l : losses) {
            for (int b : batches) out.push_back({m, l.first, l.second, b});
        }
    }
    return out;
}

const std::vector<ReferenceRow>& reference_rows() {
    using losses::Kind;
    static const std::vector<ReferenceRow> rows = {
        {"U_Net", Kind::SquareDice, Kind::SquareDice, 2, -1.0, 0.9009},
        {"OWSNet-without-refine", Kind::SquareDice, Kind::SquareDice, 2, 0.2818, 0.9165},
        {"OWSNet-IN", Kind::SquareDice, Kind::SquareDice, 2, 0.2880, 0.9194},
        {"OWSNet-BN", Kind::SquareDice, Kind::SquareDice, 2, 0.2868, 0.9156},
        {"OWSNet-IN-BN", Kind::SquareDice, Kind::SquareDice, 2, 0.2863, 0.9187},
        {"OWSNet-BN-IN", Kind::SquareDice, Kind::SquareDice, 2, 0.2899, 0.9196},
        {"OWSNet-IN-BN", Kind::CE, Kind::CE, 2, 0.0212, 0.9190},
        {"OWSNet-IN-BN", Kind::Dice, Kind::Dice, 2, 0.2225, 0.9181},
        {"OWSNet-IN-BN", Kind::ExpLogDice, Kind::ExpLogDice, 2, 0.2190, 0.9218},
        {"OWSNet-IN-BN", Kind::ExpSquareDice, Kind::ExpSquareDice, 2, 0.2929, 0.9201},
        {"OWSNet-IN-BN", Kind::CE, Kind::Dice, 2, 0.2214, 0.9168},
        {"OWSNet-IN-BN", Kind::CE, Kind::ExpLogDice, 2, 0.2282, 0.9203},
        {"OWSNet-IN-BN", Kind::CE, Kind::SquareDice, 2, 0.2939, 0.9205},
        {"OWSNet-IN-BN", Kind::SquareDice, Kind::SquareDice, 1, 0.2815, 0.9152},
        {"OWSNet-IN-BN", Kind::SquareDice, Kind::SquareDice, 4, 0.2907, 0.9190},
        {"OWSNet-IN-BN", Kind::SquareDice, Kind::SquareDice, 6, 0.2889, 0.9198},
        {"OWSNet-BN-IN", Kind::SquareDice, Kind::SquareDice, 1, 0.2790, 0.9140},
        {"OWSNet-BN-IN", Kind::SquareDice, Kind::SquareDice, 4, 0.2930, 0.9198},
        {"OWSNet-BN-IN", Kind::SquareDice, Kind::SquareDice, 6, 0.2956, 0.9219},
        {"OWSNet-IN", Kind::SquareDice, Kind::SquareDice, 1, 0.2887, 0.9187},
        {"OWSNet-IN", Kind::SquareDice, Kind::SquareDice, 4, 0.2867, 0.9174},
        {"OWSNet-IN", Kind::SquareDice, Kind::SquareDice, 6, 0.2956, 0.9208},
        {"OWSNet-BN", Kind::SquareDice, Kind::SquareDice, 1, 0.2671, 0.9018},
        {"OWSNet-BN", Kind::SquareDice, Kind::SquareDice, 4, 0.2901, 0.9221},
        {"OWSNet-BN", Kind::SquareDice, Kind::SquareDice, 6, 0.2898, 0.9202},
    };
    return rows;
}

GridSpec parse_grid(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorKind::InvalidConfig, std::string("grid is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw Error(ErrorKind::InvalidConfig, "grid: expected an object");
    GridSpec g;
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (it.key() != "models" && it.key() != "losses" && it.key() != "batches") {
            throw Error(ErrorKind::InvalidConfig, "grid." + it.key() + ": unknown key");
        }
    }
    try {
        g.models = j.at("models").get<std::vector<std::string>>();
        for (const auto& pair : j.at("losses")) {
            if (pair.is_string()) {
                const auto k = losses::parse_kind(pair.get<std::string>());
                g.losses.emplace_back(k, k);
            } else {
                const auto names = pair.get<std::vector<std::string>>();
                if (names.size() != 2) throw Error(ErrorKind::InvalidConfig, "grid.losses: expected [region, edge] pairs");
                g.losses.emplace_back(losses::parse_kind(names[0]), losses::parse_kind(names[1]));
            }
        }
        g.batches = j.value("batches", std::vector<int>{2});
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::InvalidConfig, std::string("grid: ") + e.what());
    }
    if (g.models.empty() || g.losses.empty() || g.batches.empty()) {
        throw Error(ErrorKind::InvalidConfig, "grid: models, losses and batches must be non-empty");
    }
    for (const auto& m : g.models) model_variant(m, net::ModelConfig{});
    for (int b : g.batches) {
        if (b < 1) throw Error(ErrorKind::InvalidConfig, "grid.batches: values must be >= 1");
    }
    return g;
}

namespace {

bool same_cell(const ReferenceRow& r, const GridCell& c) {
    if (r.model != c.model || r.batch != c.batch || r.loss_region != c.loss_region) return false;
    return c.model == "U_Net" || r.loss_edge == c.loss_edge;
}

void write_grid_csv(const std::filesystem::path& path, const std::vector<GridCell>& cells, const std::vector<GridRow>& rows) {
    auto f = open_for_write(path);
    std::fprintf(f.get(), "# reference,model,loss_region,loss_edge,batch,boundary_dice,particle_dice\n");
    for (const auto& ref : reference_rows()) {
        if (std::none_of(cells.begin(), cells.end(), [&](const GridCell& c) { return same_cell(ref, c); })) continue;
        std::fprintf(f.get(), "# reference,%s,%s,%s,%d,", ref.model.c_str(), losses::to_string(ref.loss_region).c_str(),
                     losses::to_string(ref.loss_edge).c_str(), ref.batch);
        if (ref.boundary < 0.0) {
            std::fprintf(f.get(), "NA,%.4f\n", ref.particle);
        } else {
            std::fprintf(f.get(), "%.4f,%.4f\n", ref.boundary, ref.particle);
        }
    }
    std::fprintf(f.get(), "model,loss_region,loss_edge,batch,boundary_dice,particle_dice,count_acc,epochs,seed\n");
    for (const auto& r : rows) {
        std::fprintf(f.get(), "%s,%s,%s,%d,", r.cell.model.c_str(), losses::to_string(r.cell.loss_region).c_str(),
                     losses::to_string(r.cell.loss_edge).c_str(), r.cell.batch);
        if (!r.ok) {
            std::fprintf(f.get(), "NA,NA,NA");
        } else if (r.cell.model == "U_Net") {
            std::fprintf(f.get(), "NA,%.6f,%.6f", r.report.particle_dice, r.report.count_accuracy);
        } else {
            std::fprintf(f.get(), "%.6f,%.6f,%.6f", r.report.boundary_dice, r.report.particle_dice, r.report.count_accuracy);
        }
        std::fprintf(f.get(), ",%d,%llu\n", r.epochs, static_cast<unsigned long long>(r.seed));
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (!rows[i].ok) std::fprintf(f.get(), "# failed row %zu: %s\n", i + 1, rows[i].error.c_str());
    }
    check_written(f.get(), path);
}

}  // namespace

std::vector<GridRow> run_grid(const GridSpec& grid, const RunConfig& base, const std::vector<data::Sample>& train_set,
                              const std::vector<data::Sample>& test_set, const std::filesystem::path& csv_path,
                              const std::function<void(const GridRow&)>& progress) {
    const auto cells = grid.cells();
    std::vector<GridRow> rows;
    for (const auto& cell : cells) {
        GridRow row;
        row.cell = cell;
        row.epochs = base.train.epochs;
        row.seed = base.train.seed;
        try {
            RunConfig cfg = base;
            cfg.model = model_variant(cell.model, base.model);
            cfg.loss.region_kind = cell.loss_region;
            cfg.loss.edge_kind = cell.loss_edge;
            cfg.train.batch = cell.batch;
            auto trained = train(cfg, train_set);
            row.report = evaluate(trained.model, test_set, cfg.postprocess);
            row.ok = true;
        } catch (const std::exception& e) {
            Tape::current().clear();
            row.error = e.what();
        }
        rows.push_back(row);
        write_grid_csv(csv_path, cells, rows);
        if (progress) progress(row);
    }
    return rows;
}

}  // namespace owps::train
