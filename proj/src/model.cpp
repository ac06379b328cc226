#include "limoseg/model.hpp"

#include "limoseg/error.hpp"

#include <cmath>
#include <sstream>

namespace limoseg {

// ---- config ------------------------------------------------------------------------------

std::string to_string(Variant v) {
    switch (v) {
        case Variant::kSingleEncoder: return "single_encoder";
        case Variant::kSingleEncoderSemantics: return "single_encoder_semantics";
        case Variant::kMultiEncoder: return "multi_encoder";
        case Variant::kMultiEncoderJoint: return "multi_encoder_joint";
    }
    return "?";
}

Variant parse_variant(const std::string& text) {
    for (auto v : {Variant::kSingleEncoder, Variant::kSingleEncoderSemantics, Variant::kMultiEncoder,
                   Variant::kMultiEncoderJoint}) {
        if (to_string(v) == text) return v;
    }
    throw InvalidConfigError("unknown variant '" + text + "'");
}

ModelConfig ModelConfig::paper() {
    ModelConfig c;
    c.encoder_channels = {16, 32, 64};
    c.joint_channels = {128, 128, 192, 192};
    c.decoder_channels = {128, 96, 64, 32, 32};
    c.rows = 480;
    c.cols = 320;
    return c;
}

int ModelConfig::input_channels() const {
    switch (variant) {
        case Variant::kMultiEncoder:
        case Variant::kMultiEncoderJoint: return 6;
        case Variant::kSingleEncoder: return 4;
        case Variant::kSingleEncoderSemantics: return 7;
    }
    return 0;
}

void ModelConfig::validate() const {
    if (rows <= 0 || cols <= 0 || rows % 32 != 0 || cols % 32 != 0) {
        throw InvalidConfigError("model grid " + std::to_string(rows) + "x" + std::to_string(cols) +
                                 " must be positive and divisible by 32");
    }
    auto check = [](const auto& arr, const char* what) {
        for (int c : arr) {
            if (c <= 0) throw InvalidConfigError(std::string(what) + " channel counts must be positive");
        }
    };
    check(encoder_channels, "encoder");
    check(joint_channels, "joint");
    check(decoder_channels, "decoder");
    if (block_style == BlockStyle::kParallel) {
        for (int c : encoder_channels)
            if (c % 2) throw InvalidConfigError("parallel DB blocks need even channel counts");
        for (int c : joint_channels)
            if (c % 2) throw InvalidConfigError("parallel DB blocks need even channel counts");
    }
}

namespace {

template <std::size_t N>
std::string join(const std::array<int, N>& a) {
    std::string s;
    for (std::size_t i = 0; i < N; ++i) s += (i ? "," : "") + std::to_string(a[i]);
    return s;
}

template <std::size_t N>
std::array<int, N> split(const std::string& s, const std::string& key) {
    std::array<int, N> out{};
    std::istringstream in(s);
    std::string tok;
    std::size_t i = 0;
    while (std::getline(in, tok, ',')) {
        if (i >= N) throw ParseError("key '" + key + "': expected " + std::to_string(N) + " values");
        try {
            out[i++] = std::stoi(tok);
        } catch (const std::logic_error&) {
            throw ParseError("key '" + key + "': bad integer '" + tok + "'");
        }
    }
    if (i != N) throw ParseError("key '" + key + "': expected " + std::to_string(N) + " values");
    return out;
}

}  // namespace

KeyValues ModelConfig::to_kv() const {
    KeyValues kv;
    kv.set("model.variant", to_string(variant));
    kv.set("model.residual", to_string(residual_mode));
    kv.set("model.encoder_channels", join(encoder_channels));
    kv.set("model.joint_channels", join(joint_channels));
    kv.set("model.decoder_channels", join(decoder_channels));
    kv.set("model.rows", rows);
    kv.set("model.cols", cols);
    kv.set("model.block_style", std::string(block_style == BlockStyle::kParallel ? "parallel" : "sequential"));
    kv.set("model.init_seed", static_cast<long long>(init_seed));
    return kv;
}

ModelConfig ModelConfig::from_kv(const KeyValues& kv) {
    ModelConfig c;
    c.variant = parse_variant(kv.get_or("model.variant", to_string(c.variant)));
    c.residual_mode = parse_residual_mode(kv.get_or("model.residual", to_string(c.residual_mode)));
    if (kv.has("model.encoder_channels"))
        c.encoder_channels = split<3>(kv.get("model.encoder_channels"), "model.encoder_channels");
    if (kv.has("model.joint_channels"))
        c.joint_channels = split<4>(kv.get("model.joint_channels"), "model.joint_channels");
    if (kv.has("model.decoder_channels"))
        c.decoder_channels = split<5>(kv.get("model.decoder_channels"), "model.decoder_channels");
    c.rows = kv.get_or("model.rows", c.rows);
    c.cols = kv.get_or("model.cols", c.cols);
    const std::string style = kv.get_or("model.block_style", std::string("parallel"));
    if (style == "parallel") {
        c.block_style = BlockStyle::kParallel;
    } else if (style == "sequential") {
        c.block_style = BlockStyle::kSequential;
    } else {
        throw InvalidConfigError("unknown block style '" + style + "'");
    }
    c.init_seed = static_cast<std::uint64_t>(kv.get_or("model.init_seed", 0LL));
    c.validate();
    return c;
}

bool ModelConfig::same_architecture(const ModelConfig& o) const {
    return variant == o.variant && residual_mode == o.residual_mode && encoder_channels == o.encoder_channels &&
           joint_channels == o.joint_channels && decoder_channels == o.decoder_channels && rows == o.rows &&
           cols == o.cols && block_style == o.block_style;
}

// ---- blocks ---------------------------------------------------------------------------------

ad::Tensor db_block(const ad::Tensor& input, const DbWeights& w, bool pool) {
    const ad::Tensor a = ad::relu(ad::conv2d(input, w.w5, w.b5, 2));
    const ad::Tensor b = ad::relu(ad::conv2d(input, w.w3, w.b3, 1));
    const ad::Tensor cat = ad::concat_channels<float>({a, b});
    return pool ? ad::maxpool2(cat) : cat;
}

ad::Tensor ub_block(const ad::Tensor& input, const UbWeights& w) {
    const ad::Tensor up = ad::relu(ad::conv_transpose2d(input, w.up_w, w.up_b));
    return ad::relu(ad::conv2d(up, w.w3, w.b3, 1));
}

ad::Tensor fuse(const ad::Tensor& e1, const ad::Tensor& e2, const ad::Tensor& e3) {
    if (e1.shape() != e2.shape() || e1.shape() != e3.shape()) {
        throw ShapeError("fuse inputs differ in shape: " + ad::shape_str(e1.shape()) + ", " +
                         ad::shape_str(e2.shape()) + ", " + ad::shape_str(e3.shape()));
    }
    return ad::concat_channels<float>({e1, e2, e3, ad::mul(ad::mul(e1, e2), e3)});
}

// ---- model ----------------------------------------------------------------------------------

std::size_t Model::add_param(Rng& rng, const std::string& name, const ad::Shape& shape, double std_dev) {
    std::vector<float> data(ad::numel(shape), 0.f);
    if (std_dev > 0.0)
        for (auto& v : data) v = static_cast<float>(rng.normal(0.0, std_dev));
    index_[name] = params_.size();
    names_.push_back(name);
    params_.push_back(ad::Tensor::from(shape, std::move(data), true));
    return params_.size() - 1;
}

Model::Conv Model::add_conv(Rng& rng, const std::string& name, int cin, int cout, int k) {
    Conv c;
    c.kernel = k;
    c.weight = add_param(rng, name + ".weight", {cout, cin, k, k}, std::sqrt(2.0 / (cin * k * k)));
    c.bias = add_param(rng, name + ".bias", {cout}, 0.0);
    return c;
}

Model::DownBlock Model::add_down(Rng& rng, const std::string& name, int cin, int cout, bool pool) {
    DownBlock b;
    b.name = name;
    b.pool = pool;
    if (config_.block_style == BlockStyle::kParallel) {
        b.first = add_conv(rng, name + ".conv5", cin, cout / 2, 5);
        b.second = add_conv(rng, name + ".conv3", cin, cout / 2, 3);
    } else {
        b.first = add_conv(rng, name + ".conv5", cin, cout, 5);
        b.second = add_conv(rng, name + ".conv3", cout, cout, 3);
    }
    return b;
}

Model::UpBlock Model::add_up(Rng& rng, const std::string& name, int cin, int cout) {
    UpBlock b;
    b.name = name;
    b.up_weight = add_param(rng, name + ".up.weight", {cin, cout, 2, 2}, std::sqrt(2.0 / cin));
    b.up_bias = add_param(rng, name + ".up.bias", {cout}, 0.0);
    b.conv = add_conv(rng, name + ".conv3", cout, cout, 3);
    return b;
}

Model::Model(const ModelConfig& config) : config_(config) {
    config_.validate();
    Rng rng(Rng::derive(config_.init_seed, 0x4D4F44454CULL));
    const auto& ec = config_.encoder_channels;
    const auto& jc = config_.joint_channels;
    const auto& dc = config_.decoder_channels;

    const int n_enc = config_.multi_encoder() ? 3 : 1;
    const int enc_in = config_.multi_encoder() ? 2 : config_.input_channels();
    for (int e = 0; e < n_enc; ++e) {
        std::vector<DownBlock> blocks;
        int cin = enc_in;
        for (int s = 0; s < 3; ++s) {
            blocks.push_back(add_down(rng, "enc" + std::to_string(e) + ".db" + std::to_string(s + 1), cin, ec[s], true));
            cin = ec[s];
        }
        encoders_.push_back(std::move(blocks));
    }
    // Width of stage s features reaching the joint chain / decoder skips.
    const int mult = config_.multi_encoder() ? 4 : 1;
    const int stage1 = mult * ec[0], stage2 = mult * ec[1], stage3 = mult * ec[2];

    int cin = stage3;
    std::size_t first_up = 0;
    if (config_.has_joint_chain()) {
        for (int j = 0; j < 4; ++j) {
            joint_.push_back(add_down(rng, "joint.db" + std::to_string(j + 1), cin, jc[j], j < 2));
            cin = jc[j];
        }
        decoder_.push_back(add_up(rng, "dec.ub1", cin, dc[0]));
        decoder_.push_back(add_up(rng, "dec.ub2", dc[0], dc[1]));
        cin = dc[1];
        first_up = 2;
    }
    // The remaining three UB blocks run /8 → /4 → /2 → /1 with skips at /4 and /2.
    decoder_.push_back(add_up(rng, "dec.ub" + std::to_string(first_up + 1), cin, dc[2]));
    decoder_.push_back(add_up(rng, "dec.ub" + std::to_string(first_up + 2), dc[2] + stage2, dc[3]));
    decoder_.push_back(add_up(rng, "dec.ub" + std::to_string(first_up + 3), dc[3] + stage1, dc[4]));
    head_ = add_conv(rng, "head", dc[4], 2, 1);
    // Head weights start small so initial predictions are near uniform.
    for (auto& v : params_[head_.weight].storage()) v *= 0.1f;
}

Model Model::clone() const {
    ModelConfig cfg = config_;
    Model copy(cfg);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        copy.params_[i] = ad::Tensor::from(params_[i].shape(), params_[i].storage(), params_[i].requires_grad());
    }
    return copy;
}

ad::Tensor& Model::parameter(const std::string& name) {
    const auto it = index_.find(name);
    if (it == index_.end()) throw InvalidConfigError("model has no parameter '" + name + "'");
    return params_[it->second];
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
}

void Model::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

ad::Tensor Model::run_conv(const Conv& c, const ad::Tensor& x) const {
    return ad::conv2d(x, params_[c.weight], params_[c.bias], (c.kernel - 1) / 2);
}

ad::Tensor Model::run_down(const DownBlock& b, const ad::Tensor& x, const ActivationHook& hook) const {
    ad::Tensor out;
    if (config_.block_style == BlockStyle::kParallel) {
        out = db_block(x, {params_[b.first.weight], params_[b.first.bias], params_[b.second.weight],
                           params_[b.second.bias]},
                       b.pool);
    } else {
        out = ad::relu(run_conv(b.second, ad::relu(run_conv(b.first, x))));
        if (b.pool) out = ad::maxpool2(out);
    }
    return hook ? hook(b.name, out) : out;
}

ad::Tensor Model::run_up(const UpBlock& b, const ad::Tensor& x, const ActivationHook& hook) const {
    ad::Tensor out = ub_block(x, {params_[b.up_weight], params_[b.up_bias], params_[b.conv.weight],
                                  params_[b.conv.bias]});
    return hook ? hook(b.name, out) : out;
}

ad::Tensor Model::forward(const ad::Tensor& input, const ActivationHook& hook) const {
    if (input.ndim() != 4 || input.dim(1) != config_.input_channels() || input.dim(2) != config_.rows ||
        input.dim(3) != config_.cols) {
        throw ShapeError("model input " + ad::shape_str(input.shape()) + " does not match config [N," +
                         std::to_string(config_.input_channels()) + "," + std::to_string(config_.rows) + "," +
                         std::to_string(config_.cols) + "]");
    }
    std::array<ad::Tensor, 3> stages;
    if (config_.multi_encoder()) {
        std::array<std::array<ad::Tensor, 3>, 3> feats;
        for (int e = 0; e < 3; ++e) {
            ad::Tensor x = ad::slice_channels(input, 2 * e, 2);
            for (int s = 0; s < 3; ++s) {
                x = run_down(encoders_[e][s], x, hook);
                feats[s][e] = x;
            }
        }
        for (int s = 0; s < 3; ++s) {
            stages[s] = fuse(feats[s][0], feats[s][1], feats[s][2]);
            if (hook) stages[s] = hook("fuse" + std::to_string(s + 1), stages[s]);
        }
    } else {
        ad::Tensor x = input;
        for (int s = 0; s < 3; ++s) {
            x = run_down(encoders_[0][s], x, hook);
            stages[s] = x;
        }
    }

    ad::Tensor x = stages[2];
    for (const auto& block : joint_) x = run_down(block, x, hook);
    const std::size_t skip_from = decoder_.size() - 3;
    for (std::size_t i = 0; i < decoder_.size(); ++i) {
        if (i == skip_from + 1) x = ad::concat_channels<float>({x, stages[1]});
        if (i == skip_from + 2) x = ad::concat_channels<float>({x, stages[0]});
        x = run_up(decoder_[i], x, hook);
    }
    return run_conv(head_, x);
}

ad::Tensor Model::forward(const std::vector<const BevWindow*>& batch, const ActivationHook& hook) const {
    return forward(make_input(batch, config_), hook);
}

ad::Tensor make_input(const std::vector<const BevWindow*>& batch, const ModelConfig& config) {
    if (batch.empty()) throw ShapeError("empty batch");
    const int rows = config.rows, cols = config.cols, ch = config.input_channels();
    const std::size_t hw = static_cast<std::size_t>(rows) * cols;
    std::vector<float> data(batch.size() * ch * hw);
    for (std::size_t n = 0; n < batch.size(); ++n) {
        const BevWindow& w = *batch[n];
        if (w.rows() != rows || w.cols() != cols) {
            throw ShapeError("window grid " + std::to_string(w.rows()) + "x" + std::to_string(w.cols()) +
                             " does not match model grid " + std::to_string(rows) + "x" + std::to_string(cols));
        }
        std::vector<const BevImage*> planes;
        if (config.multi_encoder()) {
            planes = {&w.frames[0], &w.residual, &w.frames[1], &w.residual, &w.frames[2], &w.residual};
        } else {
            planes = {&w.frames[0], &w.frames[1], &w.frames[2], &w.residual};
            if (config.uses_semantics()) {
                if (w.semantics.size() != 3) throw ShapeError("semantics variant needs 3 semantic maps per window");
                for (const auto& s : w.semantics) planes.push_back(&s);
            }
        }
        for (std::size_t c = 0; c < planes.size(); ++c) {
            if (!planes[c]->same_shape(w.frames[0])) throw ShapeError("window channels differ in shape");
            std::copy(planes[c]->data.begin(), planes[c]->data.end(),
                      data.begin() + static_cast<std::ptrdiff_t>((n * ch + c) * hw));
        }
    }
    return ad::Tensor::from({static_cast<int>(batch.size()), ch, rows, cols}, std::move(data));
}

std::vector<Mask> predict_masks(const ad::Tensor& logits) {
    if (logits.ndim() != 4 || logits.dim(1) != 2) throw ShapeError("predict_masks expects [N,2,H,W] logits");
    const int n = logits.dim(0), h = logits.dim(2), w = logits.dim(3);
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    std::vector<Mask> out;
    const auto x = logits.data();
    for (int s = 0; s < n; ++s) {
        Mask m(h, w, kStatic);
        const std::size_t base = static_cast<std::size_t>(s) * 2 * hw;
        for (std::size_t p = 0; p < hw; ++p) m.data[p] = x[base + hw + p] > x[base + p] ? kMoving : kStatic;
        out.push_back(std::move(m));
    }
    return out;
}

// ---- checkpoints ------------------------------------------------------------------------------

Checkpoint make_checkpoint(const Model& model, const KeyValues& metadata) {
    Checkpoint ck;
    ck.config = model.config();
    ck.metadata = metadata;
    for (std::size_t i = 0; i < model.parameters().size(); ++i) {
        const auto& p = model.parameters()[i];
        NamedArray a{model.parameter_names()[i], {}, {p.storage().begin(), p.storage().end()}};
        for (int d : p.shape()) a.dims.push_back(static_cast<std::uint32_t>(d));
        ck.tensors.push_back(std::move(a));
    }
    return ck;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ck) {
    KeyValues text = ck.config.to_kv();
    for (const auto& [k, v] : ck.metadata.entries()) text.set("meta." + k, v);
    Container c{text.str(), ck.tensors};
    write_container(path, c);
}

void save_checkpoint(const fs::path& path, const Model& model, const KeyValues& metadata) {
    save_checkpoint(path, make_checkpoint(model, metadata));
}

Checkpoint load_checkpoint(const fs::path& path) {
    if (!fs::exists(path)) throw MissingArtifactError("missing checkpoint " + path.string());
    Container c = read_container(path);
    Checkpoint ck;
    const KeyValues text = KeyValues::parse(c.text);
    if (!text.has("model.variant")) throw FormatError(path.string() + ": not a model checkpoint");
    try {
        ck.config = ModelConfig::from_kv(text);
    } catch (const Error& e) {
        throw FormatError(path.string() + ": bad model config: " + e.what());
    }
    for (const auto& [k, v] : text.entries()) {
        if (k.rfind("meta.", 0) == 0) ck.metadata.set(k.substr(5), v);
    }
    ck.tensors = std::move(c.arrays);
    return ck;
}

void load_weights(Model& model, const Checkpoint& ck) {
    if (!model.config().same_architecture(ck.config)) {
        throw IncompatibleCheckpointError("checkpoint architecture (" + to_string(ck.config.variant) + ", residual " +
                                          to_string(ck.config.residual_mode) + ") does not match the model (" +
                                          to_string(model.config().variant) + ", residual " +
                                          to_string(model.config().residual_mode) + ")");
    }
    const auto& names = model.parameter_names();
    if (ck.tensors.size() != names.size()) {
        throw IncompatibleCheckpointError("checkpoint has " + std::to_string(ck.tensors.size()) + " tensors, model " +
                                          std::to_string(names.size()));
    }
    std::map<std::string, const NamedArray*> by_name;
    for (const auto& t : ck.tensors) {
        if (!by_name.emplace(t.name, &t).second) throw FormatError("duplicate tensor '" + t.name + "'");
    }
    for (std::size_t i = 0; i < names.size(); ++i) {
        const auto it = by_name.find(names[i]);
        if (it == by_name.end()) throw IncompatibleCheckpointError("checkpoint lacks tensor '" + names[i] + "'");
        auto& p = model.parameters()[i];
        std::vector<int> dims(it->second->dims.begin(), it->second->dims.end());
        if (dims != p.shape()) {
            throw IncompatibleCheckpointError("tensor '" + names[i] + "' has shape " + ad::shape_str(dims) +
                                              ", model expects " + ad::shape_str(p.shape()));
        }
        p.storage().assign(it->second->data.begin(), it->second->data.end());
    }
}

Model model_from_checkpoint(const Checkpoint& ck, const ModelConfig* expected) {
    if (expected && !expected->same_architecture(ck.config)) {
        throw IncompatibleCheckpointError("checkpoint is " + to_string(ck.config.variant) + "/" +
                                          to_string(ck.config.residual_mode) + ", expected " +
                                          to_string(expected->variant) + "/" + to_string(expected->residual_mode));
    }
    Model model(ck.config);
    load_weights(model, ck);
    return model;
}

}  // namespace limoseg
