#include "sseg/pseudomask.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "json.hpp"
#include "sseg/autograd.hpp"
#include "sseg/checkpoint.hpp"
#include "sseg/eval.hpp"
#include "sseg/kmeans.hpp"

namespace fs = std::filesystem;

namespace sseg {

// ---------------- desk-scale extractor ----------------

PatchStatBackbone::PatchStatBackbone(int stride, double position_weight)
    : stride_(stride), position_weight_(position_weight) {
    if (stride < 1) throw std::invalid_argument("PatchStatBackbone: stride must be positive");
}

std::string PatchStatBackbone::id() const {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "patchstat_s%d_pw%g", stride_, position_weight_);
    return buf;
}

FeatureTokens PatchStatBackbone::extract(const ImageU8& image) const {
    if (image.channels != 3) throw std::invalid_argument("PatchStatBackbone: expects RGB input");
    if (image.height % stride_ != 0 || image.width % stride_ != 0)
        throw std::invalid_argument("PatchStatBackbone: dimensions must be stride multiples");
    const int h = image.height / stride_, w = image.width / stride_;
    FeatureTokens ft;
    ft.stride = stride_;
    ft.grid = Tensor({h, w, 8});
    const double inv_count = 1.0 / (static_cast<double>(stride_) * stride_);
    for (int ty = 0; ty < h; ++ty) {
        for (int tx = 0; tx < w; ++tx) {
            double mean[3] = {0, 0, 0}, sq[3] = {0, 0, 0};
            for (int dy = 0; dy < stride_; ++dy) {
                for (int dx = 0; dx < stride_; ++dx) {
                    for (int c = 0; c < 3; ++c) {
                        const double v = image.at(ty * stride_ + dy, tx * stride_ + dx, c) / 255.0;
                        mean[c] += v;
                        sq[c] += v * v;
                    }
                }
            }
            for (int c = 0; c < 3; ++c) {
                mean[c] *= inv_count;
                const double var = std::max(0.0, sq[c] * inv_count - mean[c] * mean[c]);
                ft.grid.at(ty, tx, c) = mean[c];
                ft.grid.at(ty, tx, 3 + c) = std::sqrt(var);
            }
            ft.grid.at(ty, tx, 6) = position_weight_ * (ty + 0.5) / h;
            ft.grid.at(ty, tx, 7) = position_weight_ * (tx + 0.5) / w;
        }
    }
    return ft;
}

// ---------------- external transformer adapter ----------------

struct VitFeatureBackbone::Impl {
    std::string id;
    int patch_size = 0;
    int dim = 0;
    int layers = 0;
    int heads = 0;
    int pos_grid = 0;
    std::map<std::string, Tensor> arrays;

    const Tensor& arr(const std::string& name) const {
        const auto it = arrays.find(name);
        if (it == arrays.end())
            throw std::runtime_error("vit adapter: missing array '" + name + "'");
        return it->second;
    }
};

VitFeatureBackbone::VitFeatureBackbone(const std::string& weights_path)
    : impl_(std::make_unique<Impl>()) {
    ArrayStore store = load_arrays(weights_path);
    nlohmann::json meta = nlohmann::json::parse(store.meta_json);
    if (meta.value("arch", "") != "vit")
        throw std::runtime_error("vit adapter: weights file is not a vit archive");
    impl_->patch_size = meta.at("patch_size").get<int>();
    impl_->dim = meta.at("dim").get<int>();
    impl_->layers = meta.at("layers").get<int>();
    impl_->heads = meta.at("heads").get<int>();
    impl_->pos_grid = meta.at("pos_grid").get<int>();
    impl_->id = meta.value("id", fs::path(weights_path).stem().string());
    impl_->arrays = std::move(store.arrays);
    if (impl_->dim % impl_->heads != 0)
        throw std::runtime_error("vit adapter: dim must divide evenly into heads");
}

VitFeatureBackbone::~VitFeatureBackbone() = default;

std::string VitFeatureBackbone::id() const { return impl_->id; }
int VitFeatureBackbone::stride() const { return impl_->patch_size; }

FeatureTokens VitFeatureBackbone::extract(const ImageU8& image) const {
    namespace ag = sseg::ag;
    const Impl& m = *impl_;
    if (image.channels != 3) throw std::invalid_argument("vit adapter: expects RGB input");
    if (image.height % m.patch_size != 0 || image.width % m.patch_size != 0)
        throw std::invalid_argument("vit adapter: dimensions must be patch multiples");
    const int h = image.height / m.patch_size, w = image.width / m.patch_size;
    if (h > m.pos_grid || w > m.pos_grid)
        throw std::invalid_argument("vit adapter: image exceeds the position grid");

    ag::NoGradGuard ng;
    const int ps = m.patch_size;
    Tensor patches({static_cast<std::int64_t>(h) * w, static_cast<std::int64_t>(3) * ps * ps});
    for (int ty = 0; ty < h; ++ty)
        for (int tx = 0; tx < w; ++tx) {
            const std::int64_t row = static_cast<std::int64_t>(ty) * w + tx;
            std::int64_t k = 0;
            for (int c = 0; c < 3; ++c)
                for (int dy = 0; dy < ps; ++dy)
                    for (int dx = 0; dx < ps; ++dx, ++k)
                        patches.at(row, k) = image.at(ty * ps + dy, tx * ps + dx, c) / 255.0;
        }

    ag::Var x = ag::add_row_bias(ag::matmul(ag::Var(patches), ag::Var(m.arr("patch_embed.w"))),
                                 ag::Var(m.arr("patch_embed.b")));

    // slice the h x w corner of the stored position grid
    Tensor pos({static_cast<std::int64_t>(h) * w, m.dim});
    const Tensor& pos_full = m.arr("pos_embed");
    for (int ty = 0; ty < h; ++ty)
        for (int tx = 0; tx < w; ++tx)
            for (int dd = 0; dd < m.dim; ++dd)
                pos.at(static_cast<std::int64_t>(ty) * w + tx, dd) =
                    pos_full.at(static_cast<std::int64_t>(ty) * m.pos_grid + tx, dd);
    x = ag::add(x, ag::Var(pos));

    const int hd = m.dim / m.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int l = 0; l < m.layers; ++l) {
        const std::string p = "block" + std::to_string(l) + ".";
        ag::Var y = ag::layer_norm(x, ag::Var(m.arr(p + "ln1.gain")), ag::Var(m.arr(p + "ln1.bias")));
        ag::Var q = ag::add_row_bias(ag::matmul(y, ag::Var(m.arr(p + "attn.wq"))),
                                     ag::Var(m.arr(p + "attn.bq")));
        ag::Var k = ag::add_row_bias(ag::matmul(y, ag::Var(m.arr(p + "attn.wk"))),
                                     ag::Var(m.arr(p + "attn.bk")));
        ag::Var v = ag::add_row_bias(ag::matmul(y, ag::Var(m.arr(p + "attn.wv"))),
                                     ag::Var(m.arr(p + "attn.bv")));
        std::vector<ag::Var> head_outs;
        for (int hi = 0; hi < m.heads; ++hi) {
            ag::Var qh = ag::slice_cols(q, hi * hd, (hi + 1) * hd);
            ag::Var kh = ag::slice_cols(k, hi * hd, (hi + 1) * hd);
            ag::Var vh = ag::slice_cols(v, hi * hd, (hi + 1) * hd);
            ag::Var att = ag::softmax_rows(ag::scale(ag::matmul(qh, ag::transpose(kh)), scale));
            head_outs.push_back(ag::matmul(att, vh));
        }
        ag::Var attn_out = ag::add_row_bias(
            ag::matmul(ag::concat_cols(head_outs), ag::Var(m.arr(p + "attn.wo"))),
            ag::Var(m.arr(p + "attn.bo")));
        x = ag::add(x, attn_out);

        ag::Var z = ag::layer_norm(x, ag::Var(m.arr(p + "ln2.gain")), ag::Var(m.arr(p + "ln2.bias")));
        z = ag::add_row_bias(ag::matmul(z, ag::Var(m.arr(p + "mlp.w1"))),
                             ag::Var(m.arr(p + "mlp.b1")));
        z = ag::gelu(z);
        z = ag::add_row_bias(ag::matmul(z, ag::Var(m.arr(p + "mlp.w2"))),
                             ag::Var(m.arr(p + "mlp.b2")));
        x = ag::add(x, z);
    }
    x = ag::layer_norm(x, ag::Var(m.arr("ln_f.gain")), ag::Var(m.arr("ln_f.bias")));

    FeatureTokens ft;
    ft.stride = m.patch_size;
    ft.grid = x.value().reshaped({h, w, m.dim});
    return ft;
}

// ---------------- shared operations ----------------

FeatureTokens extract_features(const ImageU8& image, const FeatureBackbone& backbone) {
    const int s = backbone.stride();
    const int ph = (image.height + s - 1) / s * s;
    const int pw = (image.width + s - 1) / s * s;
    if (ph == image.height && pw == image.width) return backbone.extract(image);

    ImageU8 padded(ph, pw, image.channels);
    for (int y = 0; y < ph; ++y) {
        const int sy = std::min(y, image.height - 1);
        for (int x = 0; x < pw; ++x) {
            const int sx = std::min(x, image.width - 1);
            for (int c = 0; c < image.channels; ++c) padded.at(y, x, c) = image.at(sy, sx, c);
        }
    }
    return backbone.extract(padded);
}

ImageU8 upsample_labels(const ImageU8& label_map, int target_h, int target_w) {
    if (target_h < label_map.height || target_w < label_map.width)
        throw std::invalid_argument("upsample_labels: target smaller than source");
    return resize_nearest(label_map, target_h, target_w);
}

ImageU8 downsample_labels_majority(const ImageU8& label_map, int target_h, int target_w) {
    if (label_map.channels != 1)
        throw std::invalid_argument("downsample_labels_majority: labels must have 1 channel");
    if (target_h < 1 || target_w < 1 || label_map.height % target_h != 0 ||
        label_map.width % target_w != 0) {
        throw std::invalid_argument("downsample_labels_majority: target must tile the source");
    }
    const int by = label_map.height / target_h;
    const int bx = label_map.width / target_w;
    ImageU8 out(target_h, target_w, 1);
    std::array<int, 256> votes{};
    for (int oy = 0; oy < target_h; ++oy) {
        for (int ox = 0; ox < target_w; ++ox) {
            votes.fill(0);
            for (int y = oy * by; y < (oy + 1) * by; ++y)
                for (int x = ox * bx; x < (ox + 1) * bx; ++x) ++votes[label_map.at(y, x, 0)];
            int best = 0;
            for (int v = 1; v < 256; ++v)
                if (votes[v] > votes[best]) best = v;
            out.at(oy, ox, 0) = static_cast<std::uint8_t>(best);
        }
    }
    return out;
}

PseudoMaskSet generate_pseudo_masks(const ImageU8& image, const FeatureBackbone& backbone, int k,
                                    std::uint64_t seed) {
    if (k < 1 || k > 255) throw std::invalid_argument("generate_pseudo_masks: k out of range");
    const FeatureTokens ft = extract_features(image, backbone);
    const std::int64_t h = ft.grid.dim(0), w = ft.grid.dim(1), d = ft.grid.dim(2);
    const Tensor points = ft.grid.reshaped({h * w, d});
    const KMeansResult km = kmeans(points, k, seed);

    ImageU8 token_labels(static_cast<int>(h), static_cast<int>(w), 1);
    for (std::int64_t i = 0; i < h * w; ++i)
        token_labels.pixels[static_cast<std::size_t>(i)] =
            static_cast<std::uint8_t>(km.assignments[static_cast<std::size_t>(i)]);

    ImageU8 full = upsample_labels(token_labels, static_cast<int>(h) * ft.stride,
                                   static_cast<int>(w) * ft.stride);
    if (full.height != image.height || full.width != image.width)
        full = crop(full, 0, 0, image.height, image.width);

    // canonical first-occurrence relabeling
    std::vector<int> remap(static_cast<std::size_t>(k), -1);
    int next = 0;
    for (auto& px : full.pixels) {
        int& m = remap[px];
        if (m < 0) m = next++;
        px = static_cast<std::uint8_t>(m);
    }
    return {std::move(full), next};
}

double oracle_miou(const PseudoMaskSet& pseudo, const LabeledImage& gt) {
    const ImageU8& pm = pseudo.label_map;
    if (pm.height != gt.labels.height || pm.width != gt.labels.width)
        throw std::invalid_argument("oracle_miou: shape mismatch");

    const int n_classes = static_cast<int>(gt.class_names.size());
    // votes[segment][class]
    std::vector<std::vector<std::int64_t>> votes(
        static_cast<std::size_t>(pseudo.k), std::vector<std::int64_t>(static_cast<std::size_t>(n_classes), 0));
    for (int y = 0; y < pm.height; ++y) {
        for (int x = 0; x < pm.width; ++x) {
            const int g = gt.labels.at(y, x);
            if (g == gt.ignore_value) continue;
            if (g >= n_classes)
                throw std::invalid_argument("oracle_miou: gt value outside legend");
            ++votes[pm.at(y, x)][static_cast<std::size_t>(g)];
        }
    }
    std::vector<std::uint8_t> seg_class(static_cast<std::size_t>(pseudo.k), 0);
    for (int s = 0; s < pseudo.k; ++s) {
        std::int64_t best = -1;
        for (int c = 0; c < n_classes; ++c) {
            if (votes[static_cast<std::size_t>(s)][static_cast<std::size_t>(c)] > best) {
                best = votes[static_cast<std::size_t>(s)][static_cast<std::size_t>(c)];
                seg_class[static_cast<std::size_t>(s)] = static_cast<std::uint8_t>(c);
            }
        }
    }

    ImageU8 relabeled(pm.height, pm.width, 1);
    for (std::size_t i = 0; i < pm.pixels.size(); ++i)
        relabeled.pixels[i] = seg_class[pm.pixels[i]];

    EvalReport report(gt.class_names, Protocol::with_background);
    report.ignore_value = gt.ignore_value;
    accumulate(report, relabeled, gt.labels);
    return compute_iou(report).miou;
}

// ---------------- disk cache ----------------

std::string pseudo_cache_path(const std::string& cache_dir, const std::string& backbone_id, int k,
                              const std::string& image_id) {
    return (fs::path(cache_dir) / backbone_id / ("k" + std::to_string(k)) / (image_id + ".png"))
        .string();
}

PseudoMaskSet load_or_generate_cached(const std::string& cache_dir, const ImageU8& image,
                                      const std::string& image_id, const FeatureBackbone& backbone,
                                      int k, std::uint64_t seed) {
    const fs::path dir = fs::path(cache_dir) / backbone.id() / ("k" + std::to_string(k));
    const fs::path meta = dir / "cache_meta.txt";
    const std::string want = "seed=" + std::to_string(seed);

    if (fs::exists(meta)) {
        std::ifstream in(meta);
        std::string line;
        std::getline(in, line);
        if (line != want) {
            // seed changed; every entry under this k is stale
            fs::remove_all(dir);
        }
    }
    fs::create_directories(dir);
    if (!fs::exists(meta)) {
        const fs::path tmp = dir / "cache_meta.txt.tmp";
        {
            std::ofstream out(tmp, std::ios::trunc);
            out << want << '\n';
        }
        fs::rename(tmp, meta);
    }

    const std::string path = pseudo_cache_path(cache_dir, backbone.id(), k, image_id);
    if (fs::exists(path)) {
        PseudoMaskSet set;
        set.label_map = read_png(path);
        int max_label = 0;
        for (auto px : set.label_map.pixels) max_label = std::max(max_label, static_cast<int>(px));
        set.k = max_label + 1;
        return set;
    }
    PseudoMaskSet set = generate_pseudo_masks(image, backbone, k, seed);
    write_png(path, set.label_map);
    return set;
}

}  // namespace sseg
