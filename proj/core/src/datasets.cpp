#include "morphkit/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "morphkit/rng.hpp"

namespace morphkit {

namespace fs = std::filesystem;

// ---- IDX ---------------------------------------------------------------

namespace {

std::uint32_t read_be32(std::ifstream& in, const std::string& path, std::size_t offset) {
    unsigned char buf[4];
    in.read(reinterpret_cast<char*>(buf), 4);
    if (!in)
        throw std::runtime_error("IDX parse error in " + path + ": truncated at byte " +
                                 std::to_string(offset));
    return (static_cast<std::uint32_t>(buf[0]) << 24) | (static_cast<std::uint32_t>(buf[1]) << 16) |
           (static_cast<std::uint32_t>(buf[2]) << 8) | static_cast<std::uint32_t>(buf[3]);
}

void write_be32(std::ofstream& out, std::uint32_t v) {
    unsigned char buf[4] = {static_cast<unsigned char>(v >> 24),
                            static_cast<unsigned char>((v >> 16) & 0xff),
                            static_cast<unsigned char>((v >> 8) & 0xff),
                            static_cast<unsigned char>(v & 0xff)};
    out.write(reinterpret_cast<const char*>(buf), 4);
}

}  // namespace

LabeledSet load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw std::runtime_error("cannot open " + images_path);
    const std::uint32_t img_magic = read_be32(img, images_path, 0);
    if (img_magic != 2051)
        throw std::runtime_error("IDX parse error in " + images_path + ": bad magic " +
                                 std::to_string(img_magic) + " at byte 0 (want 2051)");
    const std::uint32_t n_img = read_be32(img, images_path, 4);
    const std::uint32_t rows = read_be32(img, images_path, 8);
    const std::uint32_t cols = read_be32(img, images_path, 12);

    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) throw std::runtime_error("cannot open " + labels_path);
    const std::uint32_t lab_magic = read_be32(lab, labels_path, 0);
    if (lab_magic != 2049)
        throw std::runtime_error("IDX parse error in " + labels_path + ": bad magic " +
                                 std::to_string(lab_magic) + " at byte 0 (want 2049)");
    const std::uint32_t n_lab = read_be32(lab, labels_path, 4);
    if (n_img != n_lab)
        throw std::runtime_error("IDX count mismatch: " + std::to_string(n_img) + " images vs " +
                                 std::to_string(n_lab) + " labels");

    LabeledSet set;
    set.images.reserve(n_img);
    set.labels.reserve(n_img);

    std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
    for (std::uint32_t i = 0; i < n_img; ++i) {
        img.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!img)
            throw std::runtime_error("IDX parse error in " + images_path +
                                     ": truncated pixel data at byte " +
                                     std::to_string(16 + static_cast<std::size_t>(i) * buf.size()));
        Image im(static_cast<int>(rows), static_cast<int>(cols));
        for (std::size_t p = 0; p < buf.size(); ++p) im.pix[p] = buf[p] / 255.0;
        set.images.push_back(std::move(im));

        char lb;
        lab.read(&lb, 1);
        if (!lab)
            throw std::runtime_error("IDX parse error in " + labels_path +
                                     ": truncated labels at byte " + std::to_string(8 + i));
        set.labels.push_back(static_cast<unsigned char>(lb));
    }
    for (int i = 0; i < 10; ++i) set.class_names.push_back(std::to_string(i));
    return set;
}

void write_idx(const std::string& images_path, const std::string& labels_path,
               const LabeledSet& set) {
    if (set.images.empty()) throw std::invalid_argument("write_idx: empty set");
    const int rows = set.images[0].rows;
    const int cols = set.images[0].cols;

    std::ofstream img(images_path, std::ios::binary);
    if (!img) throw std::runtime_error("cannot open " + images_path);
    write_be32(img, 2051);
    write_be32(img, static_cast<std::uint32_t>(set.images.size()));
    write_be32(img, static_cast<std::uint32_t>(rows));
    write_be32(img, static_cast<std::uint32_t>(cols));
    for (const Image& im : set.images) {
        for (double v : im.pix) {
            const int b = std::clamp(static_cast<int>(std::floor(v * 255.0 + 0.5)), 0, 255);
            img.put(static_cast<char>(b));
        }
    }

    std::ofstream lab(labels_path, std::ios::binary);
    if (!lab) throw std::runtime_error("cannot open " + labels_path);
    write_be32(lab, 2049);
    write_be32(lab, static_cast<std::uint32_t>(set.labels.size()));
    for (int l : set.labels) lab.put(static_cast<char>(l));
}

// ---- SCGS generator ----------------------------------------------------

namespace {

struct Vec2 {
    double x, y;
};

double cross(Vec2 o, Vec2 a, Vec2 b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

bool in_convex(const std::vector<Vec2>& poly, double x, double y) {
    bool pos = false, neg = false;
    for (std::size_t i = 0; i < poly.size(); ++i) {
        const Vec2& a = poly[i];
        const Vec2& b = poly[(i + 1) % poly.size()];
        const double c = cross(a, b, {x, y});
        if (c > 0) pos = true;
        if (c < 0) neg = true;
        if (pos && neg) return false;
    }
    return true;
}

double dist_to_segment(Vec2 p, Vec2 a, Vec2 b) {
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    double t = len2 == 0 ? 0 : ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2;
    t = std::clamp(t, 0.0, 1.0);
    const double px = a.x + t * dx - p.x;
    const double py = a.y + t * dy - p.y;
    return std::sqrt(px * px + py * py);
}

std::vector<Vec2> regular_polygon(double cx, double cy, double radius, double theta, int sides,
                                  double aspect = 1.0) {
    std::vector<Vec2> poly;
    for (int i = 0; i < sides; ++i) {
        const double a = theta + 2.0 * M_PI * i / sides;
        poly.push_back({cx + radius * std::cos(a), cy + radius * aspect * std::sin(a)});
    }
    return poly;
}

constexpr double kTau = 2.0 * M_PI;

// Filled, crisp rasterization (no anti-aliasing: targets must stay exact
// under hard morphology).
void draw_shape(Image& im, ShapeClass cls, Rng& rng, int size) {
    const double theta = rng.uniform(0.0, kTau);
    // shape parameters come first so the true extent (farthest lit pixel
    // from the center) is known before the center is placed
    double aspect = 1.0, thickness = 0.0;
    double extent_scale = 1.0, extent_add = 0.0;
    switch (cls) {
        case ShapeClass::Line:
            thickness = 1.0 + rng.next_below(3);  // 1..3 px
            extent_add = thickness * 0.5;
            break;
        case ShapeClass::Rectangle:
            aspect = rng.uniform(0.35, 0.9);
            extent_scale = std::sqrt(1.0 + aspect * aspect);  // corner reach
            break;
        case ShapeClass::Ellipse:
            aspect = rng.uniform(0.4, 0.9);  // minor/major ratio
            break;
        default:
            break;
    }
    const double r_min = size / 5.0;
    const double r_max =
        std::min(size / 2.0 - 3.0, ((size - 1) / 2.0 - 2.5 - extent_add) / extent_scale);
    const double radius = rng.uniform(r_min, std::max(r_min + 0.5, r_max));
    const double margin = radius * extent_scale + extent_add + 2.0;
    const double hi = size - 1 - margin;
    const double cx = rng.uniform(margin, std::max(margin, hi));
    const double cy = rng.uniform(margin, std::max(margin, hi));

    switch (cls) {
        case ShapeClass::Ellipse: {
            const double b = radius * aspect;
            const double ct = std::cos(theta), st = std::sin(theta);
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) {
                    const double dx = x - cx, dy = y - cy;
                    const double u = dx * ct + dy * st;
                    const double v = -dx * st + dy * ct;
                    if ((u * u) / (radius * radius) + (v * v) / (b * b) <= 1.0) im.at(y, x) = 1.0;
                }
            break;
        }
        case ShapeClass::Line: {
            const double t = thickness;
            const Vec2 a{cx + radius * std::cos(theta), cy + radius * std::sin(theta)};
            const Vec2 b{cx - radius * std::cos(theta), cy - radius * std::sin(theta)};
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x)
                    if (dist_to_segment({double(x), double(y)}, a, b) <= t * 0.5)
                        im.at(y, x) = 1.0;
            break;
        }
        case ShapeClass::Rectangle: {
            const double ct = std::cos(theta), st = std::sin(theta);
            const double hw = radius, hh = radius * aspect;
            std::vector<Vec2> poly;
            for (auto [sx, sy] : {std::pair{-1.0, -1.0}, {1.0, -1.0}, {1.0, 1.0}, {-1.0, 1.0}})
                poly.push_back({cx + sx * hw * ct - sy * hh * st, cy + sx * hw * st + sy * hh * ct});
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x)
                    if (in_convex(poly, x, y)) im.at(y, x) = 1.0;
            break;
        }
        case ShapeClass::Triangle: {
            const auto poly = regular_polygon(cx, cy, radius, theta, 3);
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x)
                    if (in_convex(poly, x, y)) im.at(y, x) = 1.0;
            break;
        }
        case ShapeClass::Pentagon: {
            const auto poly = regular_polygon(cx, cy, radius, theta, 5);
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x)
                    if (in_convex(poly, x, y)) im.at(y, x) = 1.0;
            break;
        }
    }
}

}  // namespace

LabeledSet gen_scgs(int per_class, int size, std::uint64_t seed) {
    if (size < 16) throw std::invalid_argument("gen_scgs: size must be >= 16");
    if (per_class < 1) throw std::invalid_argument("gen_scgs: per_class must be >= 1");

    LabeledSet set;
    set.class_names = {"ellipse", "line", "rectangle", "triangle", "pentagon"};
    const int classes = 5;
    set.images.reserve(static_cast<std::size_t>(per_class) * classes);
    set.labels.reserve(set.images.capacity());

    std::size_t index = 0;
    for (int k = 0; k < per_class; ++k) {
        for (int cls = 0; cls < classes; ++cls, ++index) {
            Rng rng = Rng::derive(seed, index);
            Image im(size, size);
            draw_shape(im, static_cast<ShapeClass>(cls), rng, size);
            set.images.push_back(std::move(im));
            set.labels.push_back(cls);
        }
    }
    return set;
}

// ---- digit-glyph generator ---------------------------------------------

namespace {

// 5x7 bitmap font, one row per scanline, LSB = rightmost column.
constexpr std::uint8_t kDigitFont[10][7] = {
    {0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110},  // 0
    {0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110},  // 1
    {0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111},  // 2
    {0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110},  // 3
    {0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010},  // 4
    {0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110},  // 5
    {0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110},  // 6
    {0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000},  // 7
    {0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110},  // 8
    {0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100},  // 9
};

bool glyph_bit(int digit, double gx, double gy) {
    const int col = static_cast<int>(gx);
    const int row = static_cast<int>(gy);
    if (col < 0 || col >= 5 || row < 0 || row >= 7) return false;
    return (kDigitFont[digit][row] >> (4 - col)) & 1;
}

}  // namespace

LabeledSet gen_digits(int count, std::uint64_t seed) {
    if (count < 1) throw std::invalid_argument("gen_digits: count must be >= 1");
    constexpr int kSide = 28;
    LabeledSet set;
    for (int i = 0; i < 10; ++i) set.class_names.push_back(std::to_string(i));
    set.images.reserve(static_cast<std::size_t>(count));
    set.labels.reserve(static_cast<std::size_t>(count));

    for (int i = 0; i < count; ++i) {
        Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(i));
        const int digit = static_cast<int>(rng.next_below(10));
        const double h = rng.uniform(14.0, 22.0);
        const double w = h * 5.0 / 7.0;
        const double x0 = rng.uniform(2.0, kSide - 2.0 - w);
        const double y0 = rng.uniform(2.0, kSide - 2.0 - h);
        const double intensity = rng.uniform(0.7, 1.0);

        // 2x2 supersampling yields soft grayscale edges, like scanned pen
        // strokes.
        Image im(kSide, kSide);
        for (int y = 0; y < kSide; ++y) {
            for (int x = 0; x < kSide; ++x) {
                int hits = 0;
                for (double sy : {0.25, 0.75})
                    for (double sx : {0.25, 0.75}) {
                        const double gx = (x + sx - x0) / w * 5.0;
                        const double gy = (y + sy - y0) / h * 7.0;
                        if (glyph_bit(digit, gx, gy)) ++hits;
                    }
                im.at(y, x) = intensity * hits / 4.0;
            }
        }
        // sparse bright speckle, as found on scanned documents; isolated
        // dots also make every structuring-element tap observable in
        // morphological targets (a thick stroke never isolates one tap)
        for (auto& v : im.pix)
            if (rng.next_double() < 0.05) v = std::max(v, rng.uniform(0.5, 1.0));

        set.images.push_back(std::move(im));
        set.labels.push_back(digit);
    }
    return set;
}

// ---- pairs -------------------------------------------------------------

PairSet make_pairs(const std::vector<Image>& images,
                   const std::vector<std::pair<MorphMode, StructuringElement>>& ops) {
    if (ops.empty()) throw std::invalid_argument("make_pairs: empty operation sequence");
    for (const auto& [mode, se] : ops) {
        (void)mode;
        if (!images.empty() && (se.shape.height > images[0].rows || se.shape.width > images[0].cols))
            throw std::domain_error("make_pairs: SE larger than image");
    }

    PairSet pairs;
    pairs.inputs = images;
    pairs.targets.reserve(images.size());
    for (const Image& im : images) {
        Image t = im;
        for (const auto& [mode, se] : ops) t = hard_morph(t, se, mode);
        pairs.targets.push_back(std::move(t));
    }

    std::ostringstream prov;
    for (const auto& [mode, se] : ops)
        prov << (mode == MorphMode::Dilate ? "dilate" : "erode") << "(" << se.shape.height << "x"
             << se.shape.width << (se.kind == SeKind::Flat ? ",flat" : ",nonflat") << ") ";
    pairs.provenance = prov.str();
    return pairs;
}

// ---- PGM ---------------------------------------------------------------

void write_pgm(const Image& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path);
    out << "P5\n" << img.cols << " " << img.rows << "\n255\n";
    for (double v : img.pix) {
        const int b = std::clamp(static_cast<int>(std::floor(v * 255.0 + 0.5)), 0, 255);
        out.put(static_cast<char>(b));
    }
    if (!out) throw std::runtime_error("write failed for " + path);
}

Image read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);

    std::string magic;
    in >> magic;
    if (magic != "P5") throw std::runtime_error("PGM parse error in " + path + ": not P5");
    int cols = 0, rows = 0, maxval = 0;
    in >> cols >> rows >> maxval;
    if (!in || cols <= 0 || rows <= 0)
        throw std::runtime_error("PGM parse error in " + path + ": malformed header");
    if (maxval != 255)
        throw std::runtime_error("PGM parse error in " + path + ": maxval must be 255");
    in.get();  // single whitespace after header

    Image img(rows, cols);
    std::vector<unsigned char> buf(img.size());
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!in) throw std::runtime_error("PGM parse error in " + path + ": truncated pixel data");
    for (std::size_t i = 0; i < buf.size(); ++i) img.pix[i] = buf[i] / 255.0;
    return img;
}

// ---- SE JSON -----------------------------------------------------------

void export_se_json(const StructuringElement& se, const std::string& path) {
    nlohmann::json doc;
    doc["rows"] = se.shape.height;
    doc["cols"] = se.shape.width;
    doc["values"] = se.weights;
    doc["form"] = se.form == SeForm::Product ? "product" : "additive";
    doc["kind"] = se.kind == SeKind::Flat ? "flat" : "nonflat";
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path);
    out << doc.dump(2) << "\n";
}

StructuringElement import_se_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    nlohmann::json doc = nlohmann::json::parse(in);

    StructuringElement se;
    se.shape = {doc.at("rows").get<int>(), doc.at("cols").get<int>()};
    se.weights = doc.at("values").get<std::vector<double>>();
    if (se.weights.size() != static_cast<std::size_t>(se.shape.taps()))
        throw std::runtime_error("SE JSON " + path + ": value count " +
                                 std::to_string(se.weights.size()) + " does not match " +
                                 std::to_string(se.shape.taps()));
    se.form = doc.at("form").get<std::string>() == "additive" ? SeForm::Additive : SeForm::Product;
    se.kind = doc.at("kind").get<std::string>() == "flat" ? SeKind::Flat : SeKind::NonFlat;
    return se;
}

// ---- labelled directories ----------------------------------------------

void write_labels_csv(const std::string& path, const std::vector<std::string>& filenames,
                      const std::vector<int>& labels) {
    if (filenames.size() != labels.size())
        throw std::invalid_argument("write_labels_csv: length mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path);
    for (std::size_t i = 0; i < filenames.size(); ++i)
        out << filenames[i] << "," << labels[i] << "\n";
}

void write_image_dir(const std::string& dir, const LabeledSet& set) {
    fs::create_directories(dir);
    std::vector<std::string> names;
    names.reserve(set.images.size());
    for (std::size_t i = 0; i < set.images.size(); ++i) {
        std::ostringstream name;
        name << "img" << std::setw(6) << std::setfill('0') << i << ".pgm";
        names.push_back(name.str());
        write_pgm(set.images[i], (fs::path(dir) / names.back()).string());
    }
    write_labels_csv((fs::path(dir) / "labels.csv").string(), names, set.labels);
}

LabeledSet load_image_dir(const std::string& dir) {
    std::ifstream csv(fs::path(dir) / "labels.csv");
    if (!csv) throw std::runtime_error("cannot open " + dir + "/labels.csv");

    LabeledSet set;
    std::string line;
    while (std::getline(csv, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw std::runtime_error("labels.csv: malformed line '" + line + "'");
        const std::string name = line.substr(0, comma);
        set.labels.push_back(std::stoi(line.substr(comma + 1)));
        set.images.push_back(read_pgm((fs::path(dir) / name).string()));
        if (set.images.size() > 1 && !set.images.back().same_shape(set.images.front()))
            throw std::runtime_error("load_image_dir: images are not uniform in size");
    }
    if (set.images.empty()) throw std::runtime_error("load_image_dir: empty labels.csv");
    return set;
}

}  // namespace morphkit
