#include "rpnet/backbone.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "rpnet/rng.hpp"

namespace rpnet {

void BackboneConfig::validate() const {
    if (num_blocks < 2)
        throw std::invalid_argument("backbone: need at least 2 blocks, got " +
                                    std::to_string(num_blocks));
    if (int(channels.size()) != num_blocks)
        throw std::invalid_argument("backbone: channels list length " +
                                    std::to_string(channels.size()) + " != num_blocks " +
                                    std::to_string(num_blocks));
    if (groups < 1) throw std::invalid_argument("backbone: groups must be positive");
    for (int c : channels)
        if (c % groups != 0)
            throw std::invalid_argument("backbone: channel count " + std::to_string(c) +
                                        " not divisible by groups " + std::to_string(groups));
    if (input_channels != 1 && input_channels != 3)
        throw std::invalid_argument("backbone: input channels must be 1 or 3");
    if (unified_width < 1 || num_classes < 1)
        throw std::invalid_argument("backbone: unified_width and num_classes must be positive");
}

namespace {

Tensor glorot(std::vector<int> shape, int fan_in, int fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / double(fan_in + fan_out));
    std::size_t n = 1;
    for (int d : shape) n *= std::size_t(d);
    std::vector<Real> data(n);
    for (auto& v : data) v = Real(uniform_in(rng, -bound, bound));
    return Tensor::from(std::move(shape), std::move(data), true);
}

}  // namespace

Model Model::init(const BackboneConfig& config, std::uint64_t seed) {
    config.validate();
    Model m;
    m.config = config;
    Rng rng(mix_seed(seed, 0x6d6f64656cULL));
    int cin = config.input_channels;
    for (int n = 0; n < config.num_blocks; ++n) {
        const int cn = config.channels[std::size_t(n)];
        // the stem conv stays dense: the image channel count is not divisible
        // by any nontrivial group count
        const int g1 = (n == 0) ? 1 : config.groups;
        Model::Block b;
        b.w1 = glorot({3, 3, cin / g1, cn}, 9 * cin / g1, 9 * cn / g1, rng);
        b.b1 = Tensor::zeros({cn}, true);
        const int g2 = config.groups;
        b.w2 = glorot({3, 3, cn / g2, cn}, 9 * cn / g2, 9 * cn / g2, rng);
        b.b2 = Tensor::zeros({cn}, true);
        m.blocks.push_back(std::move(b));
        cin = cn;
    }
    for (int n = 0; n < config.num_blocks; ++n) {
        const int cn = config.channels[std::size_t(n)];
        m.proj_w.push_back(glorot({1, 1, cn, config.unified_width}, cn, config.unified_width, rng));
        m.proj_b.push_back(Tensor::zeros({config.unified_width}, true));
    }
    const int dn = config.channels.back();
    m.theta = glorot({dn, config.num_classes}, dn, config.num_classes, rng);
    return m;
}

std::vector<Tensor> Model::parameters() const {
    std::vector<Tensor> ps;
    for (const auto& b : blocks) {
        ps.push_back(b.w1);
        ps.push_back(b.b1);
        ps.push_back(b.w2);
        ps.push_back(b.b2);
    }
    for (std::size_t i = 0; i < proj_w.size(); ++i) {
        ps.push_back(proj_w[i]);
        ps.push_back(proj_b[i]);
    }
    ps.push_back(theta);
    return ps;
}

FeaturePyramid backbone_forward(const Tensor& image, const Model& model) {
    const auto& cfg = model.config;
    if (image.rank() != 3 || image.dim(2) != cfg.input_channels)
        throw std::invalid_argument("backbone_forward: expected {X,Y," +
                                    std::to_string(cfg.input_channels) + "} image, got " +
                                    shape_str(image.shape()));
    if (image.dim(0) < 16 || image.dim(1) < 16)
        throw std::invalid_argument("backbone_forward: image " + shape_str(image.shape()) +
                                    " too small for the downsampling chain (extents >= 16)");
    FeaturePyramid pyr;
    Tensor x = image;
    for (int n = 0; n < cfg.num_blocks; ++n) {
        const auto& b = model.blocks[std::size_t(n)];
        const int g1 = (n == 0) ? 1 : cfg.groups;
        const int stride = (n + 1 == cfg.num_blocks) ? 1 : 2;
        x = relu(bias_add(conv2d(x, b.w1, 1, 1, g1), b.b1));
        x = relu(bias_add(conv2d(x, b.w2, stride, 1, cfg.groups), b.b2));
        pyr.blocks.push_back(x);
    }
    return pyr;
}

Tensor classify(const Tensor& last_features, const Tensor& theta) {
    return linear_vec(gap(last_features), theta);
}

// ---- checkpoint io ---------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'R', 'P', 'N', 'E', 'T', 'C', 'K', '1'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts unsupported");

template <class T>
void put(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::ifstream& in, const std::string& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw std::runtime_error(path + ": truncated checkpoint");
    return v;
}

void put_tensor(std::ofstream& out, const Tensor& t) {
    put<std::uint32_t>(out, std::uint32_t(t.rank()));
    for (int i = 0; i < t.rank(); ++i) put<std::int32_t>(out, t.dim(i));
    out.write(reinterpret_cast<const char*>(t.values().data()),
              long(t.numel() * sizeof(Real)));
}

Tensor take_tensor(std::ifstream& in, const std::string& path, bool requires_grad) {
    const auto rank = take<std::uint32_t>(in, path);
    if (rank == 0 || rank > 8) throw std::runtime_error(path + ": bad tensor rank");
    std::vector<int> shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
        d = take<std::int32_t>(in, path);
        if (d <= 0) throw std::runtime_error(path + ": bad tensor extent");
        n *= std::size_t(d);
    }
    std::vector<Real> data(n);
    in.read(reinterpret_cast<char*>(data.data()), long(n * sizeof(Real)));
    if (!in) throw std::runtime_error(path + ": truncated tensor payload");
    return Tensor::from(std::move(shape), std::move(data), requires_grad);
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, 1);  // version
    put<std::uint32_t>(out, std::uint32_t(sizeof(Real)));
    const auto& c = model.config;
    put<std::int32_t>(out, c.num_blocks);
    for (int ch : c.channels) put<std::int32_t>(out, ch);
    put<std::int32_t>(out, c.groups);
    put<std::int32_t>(out, c.input_channels);
    put<std::int32_t>(out, c.unified_width);
    put<std::int32_t>(out, c.num_classes);
    const auto params = model.parameters();
    put<std::uint32_t>(out, std::uint32_t(params.size()));
    for (const auto& t : params) put_tensor(out, t);
    if (!out) throw std::runtime_error(path + ": write failed");
}

Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path + ": cannot open for reading");
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error(path + ": not an rpnet checkpoint");
    const auto version = take<std::uint32_t>(in, path);
    if (version != 1) throw std::runtime_error(path + ": unsupported checkpoint version");
    const auto real_bytes = take<std::uint32_t>(in, path);
    if (real_bytes != sizeof(Real))
        throw std::runtime_error(path + ": checkpoint stores " + std::to_string(real_bytes) +
                                 "-byte reals, this build uses " + std::to_string(sizeof(Real)));
    BackboneConfig cfg;
    cfg.num_blocks = take<std::int32_t>(in, path);
    if (cfg.num_blocks < 2 || cfg.num_blocks > 64)
        throw std::runtime_error(path + ": implausible block count");
    cfg.channels.resize(std::size_t(cfg.num_blocks));
    for (auto& ch : cfg.channels) ch = take<std::int32_t>(in, path);
    cfg.groups = take<std::int32_t>(in, path);
    cfg.input_channels = take<std::int32_t>(in, path);
    cfg.unified_width = take<std::int32_t>(in, path);
    cfg.num_classes = take<std::int32_t>(in, path);
    cfg.validate();

    Model m;
    m.config = cfg;
    const auto count = take<std::uint32_t>(in, path);
    const std::size_t expected = std::size_t(cfg.num_blocks) * 4 + std::size_t(cfg.num_blocks) * 2 + 1;
    if (count != expected) throw std::runtime_error(path + ": unexpected tensor count");
    for (int n = 0; n < cfg.num_blocks; ++n) {
        Model::Block b;
        b.w1 = take_tensor(in, path, true);
        b.b1 = take_tensor(in, path, true);
        b.w2 = take_tensor(in, path, true);
        b.b2 = take_tensor(in, path, true);
        m.blocks.push_back(std::move(b));
    }
    for (int n = 0; n < cfg.num_blocks; ++n) {
        m.proj_w.push_back(take_tensor(in, path, true));
        m.proj_b.push_back(take_tensor(in, path, true));
    }
    m.theta = take_tensor(in, path, true);
    return m;
}

}  // namespace rpnet
