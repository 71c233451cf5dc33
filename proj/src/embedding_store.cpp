#include "fairproto/embedding_store.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include <fmt/format.h>

#include "binary_io.hpp"
#include "fairproto/error.hpp"
#include "fairproto/file_util.hpp"
#include "fairproto/rng.hpp"

namespace fairproto {

const char* to_string(Split split) {
    switch (split) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::support: return "support";
        case Split::query: return "query";
    }
    return "?";
}

const char* to_string(Category category) {
    switch (category) {
        case Category::race: return "race";
        case Category::gender: return "gender";
        case Category::age_group: return "age_group";
    }
    return "?";
}

void DatasetManifest::validate() const {
    if (dim_vit == 0) throw ValidationError("dim_vit must be positive");
    const auto dim = dim_total();
    std::set<std::uint32_t> used;
    for (const auto& r : records) {
        if (r.vector.size() != dim) {
            throw ValidationError(fmt::format("record '{}': vector length {} != dim_total {}", r.id,
                                              r.vector.size(), dim));
        }
        for (std::size_t i = 0; i < r.vector.size(); ++i) {
            if (!std::isfinite(r.vector[i])) {
                throw ValidationError(fmt::format("record '{}': non-finite entry at index {}", r.id, i));
            }
        }
        if (!class_table.contains(r.class_id)) {
            throw ValidationError(
                fmt::format("record '{}': class_id {} missing from class table", r.id, r.class_id));
        }
        if (static_cast<std::uint8_t>(r.split) > 3) {
            throw ValidationError(fmt::format("record '{}': invalid split", r.id));
        }
        used.insert(r.class_id);
    }
    for (const auto& [id, name] : class_table) {
        if (!used.contains(id)) {
            throw ValidationError(fmt::format("class {} ('{}') has no records", id, name));
        }
    }
}

const std::string& DatasetManifest::class_name(std::uint32_t class_id) const {
    auto it = class_table.find(class_id);
    if (it == class_table.end()) throw ValidationError(fmt::format("unknown class_id {}", class_id));
    return it->second;
}

std::vector<float> concat_features(std::span<const float> vit_vec, std::span<const float> resnet_vec) {
    std::vector<float> out;
    out.reserve(vit_vec.size() + resnet_vec.size());
    out.insert(out.end(), vit_vec.begin(), vit_vec.end());
    out.insert(out.end(), resnet_vec.begin(), resnet_vec.end());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!std::isfinite(out[i])) {
            throw ValidationError(fmt::format("non-finite feature at index {}", i));
        }
    }
    return out;
}

// -- binary format ------------------------------------------------------------

std::uint64_t save_manifest(const DatasetManifest& manifest, std::ostream& sink) {
    manifest.validate();
    detail::ByteWriter w(sink);
    w.raw(kManifestMagic.data(), kManifestMagic.size());
    w.u16(kManifestVersion);
    w.u32(manifest.dim_vit);
    w.u32(manifest.dim_resnet);
    w.u32(static_cast<std::uint32_t>(manifest.class_table.size()));
    for (const auto& [id, name] : manifest.class_table) {
        w.str16(name);
        w.u32(id);
    }
    w.u64(manifest.records.size());
    for (const auto& r : manifest.records) {
        w.str16(r.id);
        w.u32(r.class_id);
        for (const auto& a : r.attrs) w.str16(a);
        w.u8(static_cast<std::uint8_t>(r.split));
        w.f32_array(r.vector);
    }
    return w.bytes_written();
}

DatasetManifest load_manifest(std::istream& source) {
    detail::ByteReader r(source);
    std::array<char, 4> magic{};
    r.raw(magic.data(), magic.size(), "magic");
    if (magic != kManifestMagic) throw FormatError("not an embedding manifest (bad magic bytes)");
    auto version = r.u16("version");
    if (version != kManifestVersion) {
        throw FormatError(fmt::format("unsupported manifest version {}", version));
    }

    DatasetManifest m;
    m.dim_vit = r.u32("dim_vit");
    m.dim_resnet = r.u32("dim_resnet");
    if (m.dim_vit == 0) throw ValidationError("dim_vit must be positive");
    if (static_cast<std::uint64_t>(m.dim_vit) + m.dim_resnet > std::numeric_limits<std::uint32_t>::max()) {
        throw FormatError("dim_total overflows u32");
    }
    auto n_classes = r.u32("class count");
    for (std::uint32_t i = 0; i < n_classes; ++i) {
        auto name = r.str16("class name");
        auto id = r.u32("class id");
        if (!m.class_table.emplace(id, std::move(name)).second) {
            throw ValidationError(fmt::format("duplicate class_id {} in class table", id));
        }
    }

    const auto dim = m.dim_total();
    auto n_records = r.u64("record count");
    std::set<std::uint32_t> used;
    for (std::uint64_t i = 0; i < n_records; ++i) {
        EmbeddingRecord rec;
        rec.id = r.str16("record id");
        rec.class_id = r.u32("record class_id");
        for (auto& a : rec.attrs) a = r.str16("record attribute");
        auto split = r.u8("record split");
        if (split > 3) {
            throw ValidationError(fmt::format("record '{}': invalid split tag {}", rec.id, split));
        }
        rec.split = static_cast<Split>(split);
        rec.vector.resize(dim);
        r.f32_array(rec.vector, "record vector");
        for (std::size_t j = 0; j < dim; ++j) {
            if (!std::isfinite(rec.vector[j])) {
                throw ValidationError(fmt::format("record '{}': non-finite entry at index {}", rec.id, j));
            }
        }
        if (!m.class_table.contains(rec.class_id)) {
            throw ValidationError(fmt::format("record '{}': class_id {} missing from class table", rec.id,
                                              rec.class_id));
        }
        used.insert(rec.class_id);
        m.records.push_back(std::move(rec));
    }
    if (!r.at_end()) {
        throw FormatError(fmt::format("trailing bytes after last record at offset {}", r.offset()));
    }
    for (const auto& [id, name] : m.class_table) {
        if (!used.contains(id)) {
            throw ValidationError(fmt::format("class {} ('{}') has no records", id, name));
        }
    }
    return m;
}

std::uint64_t save_manifest_file(const DatasetManifest& manifest, const std::filesystem::path& path) {
    std::uint64_t n = 0;
    write_file_atomic(path, [&](std::ostream& out) { n = save_manifest(manifest, out); });
    return n;
}

DatasetManifest load_manifest_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
    return load_manifest(in);
}

// -- synthetic data -------------------------------------------------------------

std::vector<double> cluster_center(std::uint32_t index, std::uint32_t dim, double separation) {
    std::vector<double> c(dim, 0.0);
    if (dim == 0 || separation == 0.0) return c;
    // Slots: +e_0..+e_{dim-1}, -e_0..-e_{dim-1}, then the same at larger radius.
    const std::uint32_t slots = 2 * dim;
    const std::uint32_t level = index / slots;
    const std::uint32_t slot = index % slots;
    const std::uint32_t axis = slot % dim;
    const double sign = slot < dim ? 1.0 : -1.0;
    c[axis] = sign * (separation / std::sqrt(2.0) + level * separation);
    return c;
}

DatasetManifest synthesize(const SynthSpec& spec) {
    if (spec.classes < 2) throw UsageError("synthesize: need at least 2 classes");
    if (spec.per_class < 2) throw UsageError("synthesize: need at least 2 samples per class");
    if (spec.dim_vit < 1) throw UsageError("synthesize: dim must be >= 1");
    if (!(spec.separation_vit >= 0.0) || !(spec.separation_resnet >= 0.0)) {
        throw UsageError("synthesize: separation must be >= 0");
    }

    DatasetManifest m;
    m.dim_vit = spec.dim_vit;
    m.dim_resnet = spec.dim_resnet;
    m.backbone_tag = "synthetic";

    Rng rng(derive_seed(spec.seed, "synthesize"));
    std::normal_distribution<double> noise(0.0, 1.0);

    const std::uint32_t n = spec.per_class;
    const std::uint32_t n_train = n / 2;
    const std::uint32_t n_val = n / 4;
    const std::uint32_t rest = n - n_train - n_val;
    const std::uint32_t n_support = std::min(spec.support_per_class, rest);

    m.records.reserve(static_cast<std::size_t>(spec.classes) * n);
    for (std::uint32_t c = 0; c < spec.classes; ++c) {
        m.class_table.emplace(c, fmt::format("class_{:03}", c));
        auto center_vit = cluster_center(c, spec.dim_vit, spec.separation_vit);
        auto center_res = cluster_center(c, spec.dim_resnet, spec.separation_resnet);
        for (std::uint32_t i = 0; i < n; ++i) {
            EmbeddingRecord r;
            r.id = fmt::format("c{:03}_{:04}", c, i);
            r.class_id = c;
            if (i < n_train) {
                r.split = Split::train;
            } else if (i < n_train + n_val) {
                r.split = Split::val;
            } else if (i < n_train + n_val + n_support) {
                r.split = Split::support;
            } else {
                r.split = Split::query;
            }
            r.vector.resize(m.dim_total());
            for (std::uint32_t j = 0; j < spec.dim_vit; ++j) {
                r.vector[j] = static_cast<float>(center_vit[j] + noise(rng));
            }
            for (std::uint32_t j = 0; j < spec.dim_resnet; ++j) {
                r.vector[spec.dim_vit + j] = static_cast<float>(center_res[j] + noise(rng));
            }
            m.records.push_back(std::move(r));
        }
    }
    return m;
}

DatasetManifest synthesize_clusters(std::uint32_t k, std::uint32_t per_class, std::uint32_t dim,
                                    double separation, std::uint64_t seed,
                                    std::uint32_t support_per_class) {
    SynthSpec spec;
    spec.classes = k;
    spec.per_class = per_class;
    spec.dim_vit = dim;
    spec.separation_vit = separation;
    spec.support_per_class = support_per_class;
    spec.seed = seed;
    return synthesize(spec);
}

void label_categories(DatasetManifest& manifest, std::span<const std::uint32_t> sizes) {
    if (sizes.size() > kCategories.size()) {
        throw UsageError("at most 3 category blocks (race, gender, age_group)");
    }
    std::map<std::uint32_t, Category> assignment;
    auto it = manifest.class_table.begin();
    for (std::size_t b = 0; b < sizes.size(); ++b) {
        for (std::uint32_t i = 0; i < sizes[b]; ++i, ++it) {
            if (it == manifest.class_table.end()) {
                throw UsageError("category sizes exceed the number of classes");
            }
            assignment.emplace(it->first, kCategories[b]);
        }
    }
    for (auto& r : manifest.records) {
        r.attrs = {};
        auto a = assignment.find(r.class_id);
        if (a != assignment.end()) {
            r.attrs[static_cast<std::size_t>(a->second)] = manifest.class_table.at(r.class_id);
        }
    }
}

// -- views ----------------------------------------------------------------------

DatasetManifest subset(const DatasetManifest& manifest, std::span<const std::size_t> indices) {
    DatasetManifest out;
    out.dim_vit = manifest.dim_vit;
    out.dim_resnet = manifest.dim_resnet;
    out.backbone_tag = manifest.backbone_tag;
    out.records.reserve(indices.size());
    for (auto i : indices) {
        const auto& r = manifest.records.at(i);
        out.class_table.emplace(r.class_id, manifest.class_name(r.class_id));
        out.records.push_back(r);
    }
    return out;
}

DatasetManifest vit_only_view(const DatasetManifest& manifest) {
    DatasetManifest out = manifest;
    out.dim_resnet = 0;
    for (auto& r : out.records) r.vector.resize(manifest.dim_vit);
    return out;
}

std::vector<CategoryTask> category_tasks(const DatasetManifest& manifest) {
    std::vector<CategoryTask> tasks;
    for (auto category : kCategories) {
        CategoryTask task;
        task.name = to_string(category);
        for (std::size_t i = 0; i < manifest.records.size(); ++i) {
            if (!manifest.records[i].attr(category).empty()) task.record_indices.push_back(i);
        }
        if (!task.record_indices.empty()) tasks.push_back(std::move(task));
    }
    if (tasks.empty()) {
        CategoryTask all;
        all.name = "all";
        all.record_indices.resize(manifest.records.size());
        for (std::size_t i = 0; i < all.record_indices.size(); ++i) all.record_indices[i] = i;
        tasks.push_back(std::move(all));
    }
    return tasks;
}

std::map<std::uint32_t, std::vector<std::size_t>> records_by_class(const DatasetManifest& manifest,
                                                                   Split split) {
    std::map<std::uint32_t, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
        if (manifest.records[i].split == split) groups[manifest.records[i].class_id].push_back(i);
    }
    return groups;
}

// -- nested support / static query ---------------------------------------------

std::vector<ShotSets> nested_support_query(const DatasetManifest& manifest, std::span<const int> shots,
                                           int queries_per_class, std::uint64_t seed) {
    if (shots.empty()) throw UsageError("shots list is empty");
    for (std::size_t i = 0; i < shots.size(); ++i) {
        if (shots[i] < 1 || (i > 0 && shots[i] <= shots[i - 1])) {
            throw UsageError("shots must be positive and strictly increasing");
        }
    }
    if (queries_per_class < 1) throw UsageError("queries_per_class must be >= 1");
    const auto max_shot = static_cast<std::size_t>(shots.back());
    const auto n_query = static_cast<std::size_t>(queries_per_class);

    auto supports = records_by_class(manifest, Split::support);
    auto queries = records_by_class(manifest, Split::query);

    Rng rng(derive_seed(seed, "nested_support_query"));
    std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> drawn;
    for (const auto& [class_id, name] : manifest.class_table) {
        auto& s = supports[class_id];
        auto& q = queries[class_id];
        if (s.size() < max_shot) {
            throw CapacityError(fmt::format("class '{}' has {} support candidates, need {}", name,
                                            s.size(), max_shot),
                                name);
        }
        if (q.size() < n_query) {
            throw CapacityError(fmt::format("class '{}' has {} query candidates, need {}", name, q.size(),
                                            n_query),
                                name);
        }
        std::shuffle(s.begin(), s.end(), rng);
        std::shuffle(q.begin(), q.end(), rng);
        s.resize(max_shot);
        q.resize(n_query);
        drawn.emplace_back(s, q);
    }

    std::vector<ShotSets> out;
    for (int shot : shots) {
        ShotSets sets;
        sets.shot = shot;
        for (const auto& [s, q] : drawn) {
            sets.support.insert(sets.support.end(), s.begin(), s.begin() + shot);
            sets.query.insert(sets.query.end(), q.begin(), q.end());
        }
        out.push_back(std::move(sets));
    }
    return out;
}

}  // namespace fairproto
