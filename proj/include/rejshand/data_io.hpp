#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "rejshand/errors.hpp"
#include "rejshand/mesh_head.hpp"
#include "rejshand/params.hpp"
#include "rejshand/tensor.hpp"

namespace rejshand {

namespace fs = std::filesystem;

/// One supervised record. kp2d is in [0, 1] crop coordinates; joints3d and
/// vertices are meters, root-relative (wrist at the origin).
struct HandSample {
    std::string id;
    Tensor image;     // C x S x S, [0, 1]
    Tensor kp2d;      // J x 2
    Tensor joints3d;  // J x 3
    Tensor vertices;  // V x 3
};

inline constexpr double kKeypointSlack = 0.25;

inline void validate_sample(const HandSample& s) {
    auto fail = [&](const std::string& field, const std::string& why) {
        throw ValidationError("sample '" + s.id + "' field " + field + ": " + why);
    };
    auto check = [&](const Tensor& t, const char* field, std::size_t rank) {
        if (!t.defined()) fail(field, "missing");
        if (t.rank() != rank) fail(field, "rank " + std::to_string(t.rank()));
        for (double v : t.data()) {
            if (!std::isfinite(v)) fail(field, "non-finite value");
        }
    };
    check(s.image, "image", 3);
    check(s.kp2d, "kp2d", 2);
    check(s.joints3d, "joints3d", 2);
    check(s.vertices, "vertices", 2);
    if (s.kp2d.dim(1) != 2) fail("kp2d", "expected J x 2, got " + shape_str(s.kp2d.shape()));
    if (s.joints3d.dim(1) != 3 || s.joints3d.dim(0) != s.kp2d.dim(0)) {
        fail("joints3d", "expected " + std::to_string(s.kp2d.dim(0)) + " x 3, got " + shape_str(s.joints3d.shape()));
    }
    if (s.vertices.dim(1) != 3) fail("vertices", "expected V x 3, got " + shape_str(s.vertices.shape()));
    for (double v : s.image.data()) {
        if (v < 0.0 || v > 1.0) fail("image", "value outside [0, 1]");
    }
    for (double v : s.kp2d.data()) {
        if (v < -kKeypointSlack || v > 1.0 + kKeypointSlack) fail("kp2d", "coordinate outside the crop tolerance");
    }
}

// ---------------------------------------------------------------------------
// Camera

struct CameraIntrinsics {
    double fx = 0, fy = 0, cx = 0, cy = 0;

    void validate() const {
        if (!(fx > 0) || !(fy > 0)) throw ValidationError("camera focal lengths must be positive");
    }
};

/// Pinhole projection of N x 3 camera-frame points to N x 2 pixels.
inline Tensor project_points(const Tensor& xyz, const CameraIntrinsics& k) {
    if (xyz.rank() != 2 || xyz.dim(1) != 3) throw DimensionError("project_points expects N x 3, got " + shape_str(xyz.shape()));
    k.validate();
    const std::size_t n = xyz.dim(0);
    std::vector<double> uv(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = xyz.at(i, 0), y = xyz.at(i, 1), z = xyz.at(i, 2);
        if (!(z > 0)) throw ValidationError("projection error: point " + std::to_string(i) + " has z <= 0");
        uv[2 * i] = k.fx * x / z + k.cx;
        uv[2 * i + 1] = k.fy * y / z + k.cy;
    }
    return Tensor::from({n, 2}, std::move(uv));
}

// ---------------------------------------------------------------------------
// Sample blobs and manifests
//
// Manifest: UTF-8 text. First line "# rejshand manifest v1", then one record
// per line: "<id>\t<blob path relative to the manifest directory>". Blank
// lines and further '#' lines are ignored.
//
// Blob (all integers/floats little-endian):
//   magic "RJHSAMPL" (8 bytes), version u8 = 1,
//   u32 channels, u32 height, u32 width, u32 joints, u32 vertices,
//   f64 image[C*H*W], f64 kp2d[J*2], f64 joints3d[J*3], f64 vertices[V*3]

inline constexpr char kManifestHeader[] = "# rejshand manifest v1";
inline constexpr char kBlobMagic[8] = {'R', 'J', 'H', 'S', 'A', 'M', 'P', 'L'};
inline constexpr std::uint8_t kBlobVersion = 1;

inline void write_sample_blob(const HandSample& s, const fs::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw LoadError("cannot write sample blob " + path.string());
    os.write(kBlobMagic, 8);
    io::put_le<std::uint8_t>(os, kBlobVersion);
    for (auto d : {s.image.dim(0), s.image.dim(1), s.image.dim(2), s.kp2d.dim(0), s.vertices.dim(0)})
        io::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (const Tensor* t : {&s.image, &s.kp2d, &s.joints3d, &s.vertices})
        for (double v : t->data()) io::put_le<double>(os, v);
    if (!os) throw LoadError("failed writing sample blob " + path.string());
}

inline HandSample read_sample_blob(const fs::path& path, const std::string& id) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw LoadError("sample '" + id + "': missing blob " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || !std::equal(magic, magic + 8, kBlobMagic)) throw LoadError("sample '" + id + "': bad blob magic");
    if (io::get_le<std::uint8_t>(is, "blob header") != kBlobVersion) throw LoadError("sample '" + id + "': unsupported blob version");
    std::array<std::size_t, 5> d{};
    for (auto& v : d) v = io::get_le<std::uint32_t>(is, "blob header");
    auto read = [&](Shape shape) {
        std::vector<double> data(shape_numel(shape));
        for (auto& v : data) v = io::get_le<double>(is, "blob of sample '" + id + "'");
        return Tensor::from(std::move(shape), std::move(data));
    };
    HandSample s;
    s.id = id;
    s.image = read({d[0], d[1], d[2]});
    s.kp2d = read({d[3], 2});
    s.joints3d = read({d[3], 3});
    s.vertices = read({d[4], 3});
    if (is.peek() != std::ifstream::traits_type::eof()) throw LoadError("sample '" + id + "': trailing bytes in blob");
    return s;
}

/// Writes blobs under `<dir>/blobs/` and the manifest at `manifest`.
inline void write_manifest(const std::vector<HandSample>& samples, const fs::path& manifest) {
    const fs::path dir = manifest.parent_path().empty() ? fs::path(".") : manifest.parent_path();
    fs::create_directories(dir / "blobs");
    std::ofstream os(manifest);
    if (!os) throw LoadError("cannot write manifest " + manifest.string());
    os << kManifestHeader << '\n';
    for (const auto& s : samples) {
        if (s.id.empty() || s.id.find_first_of("\t\n\r/\\") != std::string::npos) {
            throw ValidationError("sample id '" + s.id + "' is empty or contains separators");
        }
        const fs::path rel = fs::path("blobs") / (s.id + ".rjs");
        write_sample_blob(s, dir / rel);
        os << s.id << '\t' << rel.generic_string() << '\n';
    }
    if (!os) throw LoadError("failed writing manifest " + manifest.string());
}

/// Streams samples in manifest order, validating each as it is read.
class ManifestReader {
   public:
    explicit ManifestReader(const fs::path& manifest) : is_(manifest), dir_(manifest.parent_path()) {
        if (!is_) throw LoadError("cannot open manifest " + manifest.string());
        std::string header;
        if (!std::getline(is_, header) || header != kManifestHeader) {
            throw LoadError("manifest " + manifest.string() + " lacks the '" + std::string(kManifestHeader) + "' header");
        }
    }

    std::optional<HandSample> next() {
        std::string line;
        while (std::getline(is_, line)) {
            ++line_no_;
            if (line.empty() || line[0] == '#') continue;
            const auto tab = line.find('\t');
            if (tab == std::string::npos) throw LoadError("manifest line " + std::to_string(line_no_ + 1) + " has no tab");
            const std::string id = line.substr(0, tab);
            HandSample s = read_sample_blob(dir_ / line.substr(tab + 1), id);
            validate_sample(s);
            return s;
        }
        return std::nullopt;
    }

   private:
    std::ifstream is_;
    fs::path dir_;
    std::size_t line_no_ = 0;
};

inline std::vector<HandSample> load_manifest(const fs::path& manifest) {
    ManifestReader reader(manifest);
    std::vector<HandSample> out;
    while (auto s = reader.next()) out.push_back(std::move(*s));
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticOptions {
    std::size_t image_size = 224;
    std::size_t channels = 3;
    std::size_t shape_basis = 8;
    CameraIntrinsics camera{600.0, 600.0, 112.0, 112.0};
    double camera_size = 224.0;  // pixel extent the keypoints are normalized by
    double depth = 0.6;          // root distance from the camera, meters
    std::size_t noise_cells = 0;  // image noise grid per side; 0 = per pixel
};

/// Seeded linear hand-shape model: a fixed mean cloud plus a fixed basis;
/// each sample draws coefficients, and joints come from the regressor.
inline std::vector<HandSample> make_synthetic_samples(std::size_t n, std::uint64_t seed, const JointRegressor& reg,
                                                      const SyntheticOptions& opt = {}) {
    if (n == 0) throw ContractError("make_synthetic: n must be >= 1");
    reg.validate();
    const std::size_t v = reg.vertices();
    Rng model_rng(mix_seed(seed, 1));
    std::vector<double> mean(3 * v);
    const double extent[3] = {0.04, 0.08, 0.02};
    for (std::size_t i = 0; i < v; ++i)
        for (std::size_t a = 0; a < 3; ++a) mean[3 * i + a] = model_rng.uniform(-extent[a], extent[a]);
    std::vector<std::vector<double>> basis(opt.shape_basis, std::vector<double>(3 * v));
    for (auto& b : basis)
        for (auto& x : b) x = 0.004 * model_rng.normal();

    std::vector<HandSample> out;
    out.reserve(n);
    for (std::size_t s = 0; s < n; ++s) {
        std::ostringstream id;
        id << "synth_" << std::setw(6) << std::setfill('0') << s;
        Rng rng(mix_seed(seed, 1000 + s));
        std::vector<double> verts = mean;
        for (const auto& b : basis) {
            const double beta = rng.normal();
            for (std::size_t i = 0; i < verts.size(); ++i) verts[i] += beta * b[i];
        }
        Tape tape(false);
        Tensor vt = Tensor::from({v, 3}, verts);
        Tensor joints = joints3d_forward(tape, vt, reg);
        const std::size_t j = joints.dim(0);
        const double root[3] = {joints.at(0, 0), joints.at(0, 1), joints.at(0, 2)};
        std::vector<double> jrel(joints.data().begin(), joints.data().end());
        for (std::size_t i = 0; i < j; ++i)
            for (std::size_t a = 0; a < 3; ++a) jrel[3 * i + a] -= root[a];
        for (std::size_t i = 0; i < v; ++i)
            for (std::size_t a = 0; a < 3; ++a) verts[3 * i + a] -= root[a];

        std::vector<double> cam(jrel);
        const double offset[3] = {rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02), opt.depth};
        for (std::size_t i = 0; i < j; ++i)
            for (std::size_t a = 0; a < 3; ++a) cam[3 * i + a] += offset[a];
        Tensor px = project_points(Tensor::from({j, 3}, cam), opt.camera);
        std::vector<double> kp(px.data().begin(), px.data().end());
        for (auto& x : kp) x /= opt.camera_size;

        // Uniform noise per channel and pixel, or per grid cell when noise_cells > 0.
        Rng pixels(mix_seed(seed, hash_string(id.str())));
        const std::size_t size = opt.image_size;
        const std::size_t cells = opt.noise_cells == 0 ? size : std::min(opt.noise_cells, size);
        std::vector<double> grid(opt.channels * cells * cells);
        for (auto& x : grid) x = pixels.uniform();
        std::vector<double> img(opt.channels * size * size);
        for (std::size_t c = 0; c < opt.channels; ++c)
            for (std::size_t y = 0; y < size; ++y)
                for (std::size_t x = 0; x < size; ++x)
                    img[(c * size + y) * size + x] = grid[(c * cells + y * cells / size) * cells + x * cells / size];

        HandSample sample{id.str(), Tensor::from({opt.channels, opt.image_size, opt.image_size}, std::move(img)),
                          Tensor::from({j, 2}, std::move(kp)), Tensor::from({j, 3}, std::move(jrel)),
                          Tensor::from({v, 3}, std::move(verts))};
        validate_sample(sample);
        out.push_back(std::move(sample));
    }
    return out;
}

inline fs::path make_synthetic(std::size_t n, std::uint64_t seed, const fs::path& out_dir, const JointRegressor& reg,
                               const SyntheticOptions& opt = {}) {
    auto samples = make_synthetic_samples(n, seed, reg, opt);
    fs::create_directories(out_dir);
    const fs::path manifest = out_dir / "manifest.txt";
    write_manifest(samples, manifest);
    return manifest;
}

// ---------------------------------------------------------------------------
// FreiHAND ingestion

struct LoadedImage {
    Tensor image;  // C x S x S, [0, 1], already resized to the model input
    std::size_t width = 0, height = 0;  // original pixel size
};

using ImageLoader = std::function<LoadedImage(const fs::path&)>;

namespace detail {

inline nlohmann::json read_json(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw LoadError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw LoadError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

inline Tensor json_matrix(const nlohmann::json& j, std::size_t cols, const std::string& what) {
    if (!j.is_array() || j.empty()) throw LoadError(what + " is not a non-empty array");
    std::vector<double> data;
    for (const auto& row : j) {
        if (!row.is_array() || row.size() != cols) throw LoadError(what + " rows must have " + std::to_string(cols) + " entries");
        for (const auto& v : row) data.push_back(v.get<double>());
    }
    return Tensor::from({j.size(), cols}, std::move(data));
}

}  // namespace detail

/// Converts FreiHAND-style annotations (parallel JSON arrays of per-sample
/// xyz joints, vertices and 3x3 intrinsics) plus an image directory into a
/// manifest. With k*N images for N annotations, image i uses annotation
/// i mod N. Returns the number of samples written.
inline std::size_t ingest_freihand(const fs::path& xyz_file, const fs::path& verts_file, const fs::path& k_file,
                                   const fs::path& image_dir, const fs::path& out_manifest, const ImageLoader& load_image) {
    const auto xyz = detail::read_json(xyz_file);
    const auto verts = detail::read_json(verts_file);
    const auto ks = detail::read_json(k_file);
    if (!xyz.is_array() || !verts.is_array() || !ks.is_array()) throw LoadError("annotation files must hold JSON arrays");
    if (xyz.size() != verts.size() || xyz.size() != ks.size()) {
        throw ValidationError("ingestion error: annotation lengths differ (xyz " + std::to_string(xyz.size()) +
                              ", verts " + std::to_string(verts.size()) + ", K " + std::to_string(ks.size()) + ")");
    }
    const std::size_t n = xyz.size();
    if (n == 0) throw ValidationError("ingestion error: no annotations");

    std::vector<fs::path> images;
    for (const auto& e : fs::directory_iterator(image_dir)) {
        const auto ext = e.path().extension().string();
        if (e.is_regular_file() && (ext == ".jpg" || ext == ".png" || ext == ".jpeg")) images.push_back(e.path());
    }
    std::sort(images.begin(), images.end());
    if (images.empty() || images.size() % n != 0) {
        throw ValidationError("ingestion error: " + std::to_string(images.size()) + " images is not a multiple of " +
                              std::to_string(n) + " annotations");
    }

    const fs::path dir = out_manifest.parent_path().empty() ? fs::path(".") : out_manifest.parent_path();
    fs::create_directories(dir / "blobs");
    std::ofstream os(out_manifest);
    if (!os) throw LoadError("cannot write manifest " + out_manifest.string());
    os << kManifestHeader << '\n';
    for (std::size_t i = 0; i < images.size(); ++i) {
        const std::size_t a = i % n;
        const Tensor joints = detail::json_matrix(xyz[a], 3, "xyz[" + std::to_string(a) + "]");
        const Tensor vts = detail::json_matrix(verts[a], 3, "verts[" + std::to_string(a) + "]");
        const Tensor kmat = detail::json_matrix(ks[a], 3, "K[" + std::to_string(a) + "]");
        if (kmat.dim(0) != 3) throw LoadError("K[" + std::to_string(a) + "] is not 3x3");
        const CameraIntrinsics cam{kmat.at(0, 0), kmat.at(1, 1), kmat.at(0, 2), kmat.at(1, 2)};

        LoadedImage img = load_image(images[i]);
        Tensor px = project_points(joints, cam);
        std::vector<double> kp(px.data().begin(), px.data().end());
        for (std::size_t p = 0; p < kp.size(); p += 2) {
            kp[p] /= static_cast<double>(img.width);
            kp[p + 1] /= static_cast<double>(img.height);
        }
        const double root[3] = {joints.at(0, 0), joints.at(0, 1), joints.at(0, 2)};
        auto center = [&](const Tensor& t) {
            std::vector<double> d(t.data().begin(), t.data().end());
            for (std::size_t p = 0; p < d.size(); ++p) d[p] -= root[p % 3];
            return Tensor::from(t.shape(), std::move(d));
        };
        HandSample s{images[i].stem().string(), img.image, Tensor::from({joints.dim(0), 2}, std::move(kp)),
                     center(joints), center(vts)};
        validate_sample(s);
        const fs::path rel = fs::path("blobs") / (s.id + ".rjs");
        write_sample_blob(s, dir / rel);
        os << s.id << '\t' << rel.generic_string() << '\n';
    }
    return images.size();
}

// ---------------------------------------------------------------------------
// OBJ export

using Face = std::array<std::size_t, 3>;

/// Triangle list asset, 0-based indices, in the matrix-file layout
/// ("rows 3" header, then indices).
inline std::vector<Face> read_faces(const fs::path& path) {
    const Tensor m = read_matrix_file(path);
    if (m.dim(1) != 3) throw AssetError("face file must have 3 columns");
    std::vector<Face> faces(m.dim(0));
    for (std::size_t r = 0; r < m.dim(0); ++r)
        for (std::size_t c = 0; c < 3; ++c) {
            const double v = m.at(r, c);
            if (v < 0 || v != std::floor(v)) throw AssetError("face index must be a non-negative integer");
            faces[r][c] = static_cast<std::size_t>(v);
        }
    return faces;
}

/// "v x y z" per vertex, then "f a b c" (1-based) per face when given.
inline void export_obj(const Tensor& coords, const std::vector<Face>& faces, const fs::path& path) {
    if (coords.rank() != 2 || coords.dim(1) != 3) throw DimensionError("export_obj expects V x 3, got " + shape_str(coords.shape()));
    const std::size_t v = coords.dim(0);
    for (const auto& f : faces)
        for (auto idx : f)
            if (idx >= v) throw ValidationError("export error: face index " + std::to_string(idx) + " >= " + std::to_string(v));
    std::ofstream os(path);
    if (!os) throw LoadError("cannot write " + path.string());
    os << std::setprecision(9);
    for (std::size_t i = 0; i < v; ++i) os << "v " << coords.at(i, 0) << ' ' << coords.at(i, 1) << ' ' << coords.at(i, 2) << '\n';
    for (const auto& f : faces) os << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
    if (!os) throw LoadError("failed writing " + path.string());
}

}  // namespace rejshand
