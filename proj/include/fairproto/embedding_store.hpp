#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fairproto {

enum class Split : std::uint8_t { train = 0, val = 1, support = 2, query = 3 };

const char* to_string(Split split);

/// Demographic attribute slots, in on-disk order.
enum class Category : std::uint8_t { race = 0, gender = 1, age_group = 2 };

inline constexpr std::array<Category, 3> kCategories = {Category::race, Category::gender,
                                                        Category::age_group};

const char* to_string(Category category);

/// One sample: a fused backbone feature vector plus labels.
/// An empty attribute string means the attribute is absent.
struct EmbeddingRecord {
    std::string id;
    std::uint32_t class_id = 0;
    std::array<std::string, 3> attrs;
    Split split = Split::train;
    std::vector<float> vector;

    const std::string& attr(Category c) const { return attrs[static_cast<std::size_t>(c)]; }

    bool operator==(const EmbeddingRecord&) const = default;
};

/// An embedding dataset. Vectors are laid out ViT block first, then the
/// ResNet block; dim_resnet == 0 is the ViT-only ablation layout.
///
/// backbone_tag is in-memory metadata only: the binary format has no slot
/// for it, so it does not survive save/load and is excluded from equality.
struct DatasetManifest {
    std::uint32_t dim_vit = 0;
    std::uint32_t dim_resnet = 0;
    std::string backbone_tag;
    std::map<std::uint32_t, std::string> class_table;
    std::vector<EmbeddingRecord> records;

    std::uint32_t dim_total() const { return dim_vit + dim_resnet; }

    /// Throws ValidationError naming the offending record or class.
    void validate() const;

    const std::string& class_name(std::uint32_t class_id) const;

    bool operator==(const DatasetManifest& other) const {
        return dim_vit == other.dim_vit && dim_resnet == other.dim_resnet &&
               class_table == other.class_table && records == other.records;
    }
};

/// Order-preserving concatenation; ViT entries first. Rejects non-finite
/// entries with the index (in the concatenated vector) reported.
std::vector<float> concat_features(std::span<const float> vit_vec, std::span<const float> resnet_vec);

// -- binary format ----------------------------------------------------------
//
// Little-endian, no padding:
//   "FPEM" | u16 version=1 | u32 dim_vit | u32 dim_resnet | u32 class count
//   per class:  u16 len + name bytes | u32 class_id
//   u64 record count
//   per record: u16 len + id bytes | u32 class_id | 3 x (u16 len + attr bytes)
//               | u8 split | dim_total x f32

inline constexpr std::array<char, 4> kManifestMagic = {'F', 'P', 'E', 'M'};
inline constexpr std::uint16_t kManifestVersion = 1;

/// Returns the number of bytes written. Throws IoError carrying the count
/// written before a sink failure.
std::uint64_t save_manifest(const DatasetManifest& manifest, std::ostream& sink);

/// Throws FormatError (bad magic/version/trailing bytes), CorruptionError
/// (truncation, with byte offset) or ValidationError (record id named).
DatasetManifest load_manifest(std::istream& source);

/// File variants. Saving goes through a temporary file and a rename.
std::uint64_t save_manifest_file(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest load_manifest_file(const std::filesystem::path& path);

// -- synthetic data -----------------------------------------------------------

struct SynthSpec {
    std::uint32_t classes = 7;
    std::uint32_t per_class = 60;
    std::uint32_t dim_vit = 16;
    std::uint32_t dim_resnet = 0;
    double separation_vit = 10.0;
    double separation_resnet = 0.0;
    std::uint32_t support_per_class = 5;
    std::uint64_t seed = 1;
};

/// Isotropic unit-variance Gaussian clusters. Centers sit on scaled
/// coordinate axes so that the closest pair is exactly `separation` apart.
/// Each block (ViT, ResNet) gets its own centers and separation; a block with
/// separation 0 carries no class signal.
///
/// Per class: first half train, next quarter val, then up to
/// support_per_class support records, the remainder query.
DatasetManifest synthesize(const SynthSpec& spec);

DatasetManifest synthesize_clusters(std::uint32_t k, std::uint32_t per_class, std::uint32_t dim,
                                    double separation, std::uint64_t seed,
                                    std::uint32_t support_per_class = 5);

/// Center of cluster `index` in a block of width `dim`.
std::vector<double> cluster_center(std::uint32_t index, std::uint32_t dim, double separation);

/// Labels consecutive blocks of classes as race / gender / age_group groups;
/// the attribute value is the class name. sizes.size() must be <= 3 and the
/// sizes must not exceed the class count.
void label_categories(DatasetManifest& manifest, std::span<const std::uint32_t> sizes);

// -- views --------------------------------------------------------------------

/// Copy of the records at `indices` with the class table restricted to the
/// classes they use.
DatasetManifest subset(const DatasetManifest& manifest, std::span<const std::size_t> indices);

/// Drops the ResNet block from every vector (dim_resnet becomes 0).
DatasetManifest vit_only_view(const DatasetManifest& manifest);

/// One classification task per demographic category present in the
/// attributes (exact string match on the attribute). When no record has any
/// attribute, a single task named "all" covers the whole manifest.
struct CategoryTask {
    std::string name;
    std::vector<std::size_t> record_indices;
};

std::vector<CategoryTask> category_tasks(const DatasetManifest& manifest);

/// Indices of records in a split, grouped by ascending class id.
std::map<std::uint32_t, std::vector<std::size_t>> records_by_class(const DatasetManifest& manifest,
                                                                   Split split);

// -- nested support / static query -------------------------------------------

/// Support and query record indices for one shot setting, grouped by
/// ascending class id. Within a class the support list is in draw order.
struct ShotSets {
    int shot = 0;
    std::vector<std::size_t> support;
    std::vector<std::size_t> query;
};

/// Draws max(shots) ranked support records and queries_per_class static
/// query records per class; the support set for shot s is the first s
/// ranked records. Supports come from the support split, queries from the
/// query split. Throws CapacityError naming the first short class.
std::vector<ShotSets> nested_support_query(const DatasetManifest& manifest, std::span<const int> shots,
                                           int queries_per_class, std::uint64_t seed);

}  // namespace fairproto
