#ifndef MORPHKIT_DATASETS_HPP
#define MORPHKIT_DATASETS_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "morphkit/grid.hpp"
#include "morphkit/soft_morph.hpp"

namespace morphkit {

struct LabeledSet {
    std::vector<Image> images;  // normalized to [0,1]
    std::vector<int> labels;
    std::vector<std::string> class_names;
};

struct PairSet {
    std::vector<Image> inputs;
    std::vector<Image> targets;
    std::string provenance;  // operation sequence + SE descriptor
};

enum class ShapeClass { Ellipse, Line, Rectangle, Triangle, Pentagon };

/// IDX (big-endian) reader: image magic 2051, label magic 2049, pixel
/// bytes scaled by 1/255, counts cross-checked between files. Parse
/// failures throw std::runtime_error naming the byte offset.
LabeledSet load_idx(const std::string& images_path, const std::string& labels_path);

/// IDX writer (fixtures and exports); pixels quantized to bytes.
void write_idx(const std::string& images_path, const std::string& labels_path,
               const LabeledSet& set);

/// Self-created geometric shapes: white objects on black background, one
/// shape per image, size/position/orientation randomized, each fully
/// inside the frame with a 2-pixel margin. Deterministic per seed.
LabeledSet gen_scgs(int per_class, int size, std::uint64_t seed);

/// Digit-glyph images (28x28, 10 classes, grayscale edges), the stand-in
/// for handwritten-digit data in seeded experiments.
LabeledSet gen_digits(int count, std::uint64_t seed);

/// Targets built by applying the hard oracle in sequence.
PairSet make_pairs(const std::vector<Image>& images,
                   const std::vector<std::pair<MorphMode, StructuringElement>>& ops);

/// Binary PGM (P5), maxval 255, rounding half-up on write.
void write_pgm(const Image& img, const std::string& path);
Image read_pgm(const std::string& path);

/// JSON {rows, cols, values, form, kind}; lossless double round-trip.
void export_se_json(const StructuringElement& se, const std::string& path);
StructuringElement import_se_json(const std::string& path);

/// "filename,label" per line, UTF-8, LF.
void write_labels_csv(const std::string& path, const std::vector<std::string>& filenames,
                      const std::vector<int>& labels);

/// Writes images as PGM files plus labels.csv into `dir`.
void write_image_dir(const std::string& dir, const LabeledSet& set);

/// Loads any uniform-size directory of PGM images listed in labels.csv.
LabeledSet load_image_dir(const std::string& dir);

}  // namespace morphkit

#endif
